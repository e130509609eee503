//! Toy speaker classifiers: sliding-window frame layers, statistics
//! pooling, and an additive-angular-margin softmax head.
//!
//! A model maps a feature matrix `[T, F]` (time by frequency) through a
//! stack of frame layers — each one a linear map over a sliding window of
//! `context` consecutive frames followed by relu — then summarises time by
//! concatenating the per-dimension mean and population standard deviation
//! (variance floored at `1e-10`), and projects linearly to a fixed-width
//! embedding. Classification compares the embedding against L2-normalised
//! classifier rows by cosine; for training, the true class's cosine gets an
//! additive angular margin before scaling:
//!
//! `logit_j = s * cos(theta_j)`, except `logit_t = s * cos(theta_t + m)`
//! with `theta_t` clamped so `theta_t + m <= pi`.
//!
//! Every forward path is built on a [`Tape`], so gradients with respect to
//! parameters and inputs come from the same code that produces values.
//! Plain-tensor wrappers (`forward_embed`, `forward_classify`, ...) run the
//! same graph on a scratch tape.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::seeded_rng;
use crate::tensor::{read_dump_tokens, write_dump, NodeId, Tape, Tensor, TokenReader};

/// Variance floor applied inside statistics pooling.
const VAR_FLOOR: f64 = 1e-10;

// ── Specs and parameters ─────────────────────────────────────────────────

/// Architecture of a model: enough to size every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    /// Width F of the input feature frames.
    pub input_dim: usize,
    /// Output width of each frame layer.
    pub frame_widths: Vec<usize>,
    /// Sliding-window size per frame layer (odd, >= 1).
    pub contexts: Vec<usize>,
    /// Embedding width E.
    pub embed_dim: usize,
    /// Number of classes C.
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("model spec", "input_dim must be positive"));
        }
        if self.frame_widths.is_empty() {
            return Err(Error::invalid("model spec", "at least one frame layer is required"));
        }
        if self.frame_widths.len() != self.contexts.len() {
            return Err(Error::invalid(
                "model spec",
                format!("{} widths vs {} contexts", self.frame_widths.len(), self.contexts.len()),
            ));
        }
        if self.frame_widths.contains(&0) {
            return Err(Error::invalid("model spec", "frame widths must be positive"));
        }
        if self.contexts.iter().any(|&c| c == 0 || c % 2 == 0) {
            return Err(Error::invalid("model spec", "contexts must be odd and positive"));
        }
        if self.embed_dim < 2 {
            return Err(Error::invalid("model spec", "embed_dim must be at least 2"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("model spec", "num_classes must be at least 2"));
        }
        Ok(())
    }

    /// Minimum number of input frames a forward pass needs.
    pub fn min_frames(&self) -> usize {
        self.contexts.iter().map(|c| c - 1).sum::<usize>() + 1
    }

    /// Parameter names and shapes in declaration order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut layout = Vec::new();
        let mut prev = self.input_dim;
        for (l, (&w, &c)) in self.frame_widths.iter().zip(&self.contexts).enumerate() {
            layout.push((format!("frame{l}.weight"), vec![c * prev, w]));
            layout.push((format!("frame{l}.bias"), vec![w]));
            prev = w;
        }
        layout.push(("embed.weight".to_string(), vec![2 * prev, self.embed_dim]));
        layout.push(("embed.bias".to_string(), vec![self.embed_dim]));
        layout.push(("classifier.weight".to_string(), vec![self.num_classes, self.embed_dim]));
        layout
    }
}

/// Additive-angular-margin head settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AamParams {
    /// Logit scale s.
    pub scale: f64,
    /// Angular margin m in radians, added to the true class's angle.
    pub margin: f64,
}

impl AamParams {
    pub fn new(scale: f64, margin: f64) -> Result<AamParams> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid("aam params", format!("scale {scale} must be positive")));
        }
        if !(margin.is_finite() && (0.0..std::f64::consts::FRAC_PI_2).contains(&margin)) {
            return Err(Error::invalid("aam params", format!("margin {margin} must lie in [0, pi/2)")));
        }
        Ok(AamParams { scale, margin })
    }
}

/// A model: spec plus named parameter tensors in declaration order.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<(String, Tensor)>,
}

/// Build a model with seeded Xavier-uniform weights and zero biases.
///
/// Weight entries are drawn uniformly from `[-a, a]` with
/// `a = sqrt(6 / (fan_in + fan_out))`, in declaration order (frame layers
/// first, then the embedding projection, then the classifier), row-major
/// within each tensor. The same `(spec, seed)` pair always produces
/// bitwise-identical parameters.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = seeded_rng(seed);
    let mut params = Vec::new();
    for (name, shape) in spec.param_layout() {
        let t = if name.ends_with(".bias") {
            Tensor::zeros(shape)
        } else {
            // fan_in = rows, fan_out = cols of the [in, out] weight matrix;
            // the classifier stores [C, E] but maps E -> C.
            let (fan_in, fan_out) = if name == "classifier.weight" {
                (shape[1], shape[0])
            } else {
                (shape[0], shape[1])
            };
            xavier_uniform(&shape, fan_in, fan_out, &mut rng)
        };
        params.push((name, t));
    }
    Ok(Model { spec: spec.clone(), params })
}

fn xavier_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(shape.to_vec(), data).expect("xavier init is finite")
}

impl Model {
    /// Assemble a model from a spec and pre-built parameters (shapes are
    /// validated against the spec's layout).
    pub fn from_parts(spec: ModelSpec, params: Vec<(String, Tensor)>) -> Result<Model> {
        spec.validate()?;
        let layout = spec.param_layout();
        if layout.len() != params.len() {
            return Err(Error::invalid(
                "model parameters",
                format!("expected {} tensors, got {}", layout.len(), params.len()),
            ));
        }
        for ((want_name, want_shape), (name, t)) in layout.iter().zip(&params) {
            if want_name != name {
                return Err(Error::invalid(
                    "model parameters",
                    format!("expected parameter {want_name:?}, got {name:?}"),
                ));
            }
            if t.shape() != want_shape.as_slice() {
                return Err(Error::invalid(
                    "model parameters",
                    format!("{name}: expected shape {want_shape:?}, got {:?}", t.shape()),
                ));
            }
        }
        Ok(Model { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    /// Parameter tensors in declaration order, for in-place updates.
    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Put every parameter on a tape as a leaf and return handles for
    /// building forward graphs.
    pub fn stage(&self, tape: &mut Tape) -> StagedModel {
        let param_ids = self.params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        StagedModel { spec: self.spec.clone(), param_ids }
    }
}

// ── Forward graphs ───────────────────────────────────────────────────────

/// A model whose parameters live on a tape as leaf nodes.
pub struct StagedModel {
    spec: ModelSpec,
    param_ids: Vec<NodeId>,
}

impl StagedModel {
    /// Parameter leaf ids in declaration order (matching `Model::params`).
    pub fn param_ids(&self) -> &[NodeId] {
        &self.param_ids
    }

    fn frame_weight(&self, l: usize) -> NodeId {
        self.param_ids[2 * l]
    }

    fn frame_bias(&self, l: usize) -> NodeId {
        self.param_ids[2 * l + 1]
    }

    fn embed_weight(&self) -> NodeId {
        self.param_ids[2 * self.spec.frame_widths.len()]
    }

    fn embed_bias(&self) -> NodeId {
        self.param_ids[2 * self.spec.frame_widths.len() + 1]
    }

    fn classifier_weight(&self) -> NodeId {
        self.param_ids[2 * self.spec.frame_widths.len() + 2]
    }

    /// Frame layers, statistics pooling, and the embedding projection:
    /// `[T, F] -> [E]`.
    pub fn embed(&self, tape: &mut Tape, features: NodeId) -> Result<NodeId> {
        let shape = tape.value(features).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.spec.input_dim {
            return Err(Error::shape(
                "forward",
                format!("features must be [T, {}], got {shape:?}", self.spec.input_dim),
            ));
        }
        if shape[0] < self.spec.min_frames() {
            return Err(Error::shape(
                "forward",
                format!("too few frames: {} < minimum {}", shape[0], self.spec.min_frames()),
            ));
        }
        let mut h = features;
        for l in 0..self.spec.frame_widths.len() {
            let windowed = window(tape, h, self.spec.contexts[l])?;
            let lin = tape.matmul(windowed, self.frame_weight(l))?;
            let biased = tape.add(lin, self.frame_bias(l))?;
            h = tape.relu(biased)?;
        }
        let pooled = stats_pool_graph(tape, h)?;
        let projected = tape.matmul(pooled, self.embed_weight())?;
        tape.add(projected, self.embed_bias())
    }

    /// Cosine or margin logits from an embedding node: `[E] -> [C]`.
    pub fn logits(&self, tape: &mut Tape, embedding: NodeId, aam: &AamParams, target: Option<usize>) -> Result<NodeId> {
        let e_shape = tape.value(embedding).shape().to_vec();
        if e_shape != [self.spec.embed_dim] {
            return Err(Error::shape(
                "aam-logits",
                format!("embedding must be [{}], got {e_shape:?}", self.spec.embed_dim),
            ));
        }
        if let Some(t) = target {
            if t >= self.spec.num_classes {
                return Err(Error::invalid("target class", format!("{t} out of 0..{}", self.spec.num_classes)));
            }
        }

        // Normalised embedding: e / ||e||, with 1/x built as exp(-log(x)).
        let e_sq = tape.square(embedding)?;
        let e_norm_sq = tape.reduce_sum(e_sq, None)?;
        let e_norm = tape.sqrt(e_norm_sq)?;
        if tape.value(e_norm).item()? == 0.0 {
            return Err(Error::domain("aam-logits", "zero-norm embedding"));
        }
        let e_inv = recip_positive(tape, e_norm)?;
        let e_hat = tape.mul(embedding, e_inv)?;

        // Row-normalised classifier, carried transposed: [E, C].
        let w = self.classifier_weight();
        let w_sq = tape.square(w)?;
        let row_norm_sq = tape.reduce_sum(w_sq, Some(1))?;
        let row_norm = tape.sqrt(row_norm_sq)?;
        if tape.value(row_norm).data().contains(&0.0) {
            return Err(Error::domain("aam-logits", "zero-norm classifier row"));
        }
        let row_inv = recip_positive(tape, row_norm)?;
        let w_t = tape.transpose(w)?;
        let w_hat_t = tape.mul(w_t, row_inv)?;

        // Cosines against every class row.
        let cos = tape.matmul(e_hat, w_hat_t)?;

        let Some(t) = target else {
            return tape.scale(cos, aam.scale);
        };

        // Margin on the target class: cos(theta + m) via the angle-sum
        // identity, with sin(theta) = sqrt(relu(1 - cos^2)) (relu guards
        // rounding just past 1). When theta + m would pass pi, the angle is
        // clamped there, so the margin logit saturates at cos(pi) = -1; the
        // branch is chosen from the forward value and enters the graph as a
        // constant 0/1 mask.
        let mut one_hot = vec![0.0; self.spec.num_classes];
        one_hot[t] = 1.0;
        let keep: Vec<f64> = one_hot.iter().map(|v| 1.0 - v).collect();
        let one_hot = tape.leaf(Tensor::new(vec![self.spec.num_classes], one_hot)?);
        let keep = tape.leaf(Tensor::new(vec![self.spec.num_classes], keep)?);

        let picked = tape.mul(cos, one_hot)?;
        let cos_t = tape.reduce_sum(picked, None)?;
        let one = tape.leaf(Tensor::scalar(1.0)?);
        let cos_sq = tape.square(cos_t)?;
        let sin_sq = tape.sub(one, cos_sq)?;
        let sin_sq = tape.relu(sin_sq)?;
        let sin_t = tape.sqrt(sin_sq)?;
        let a = tape.scale(cos_t, aam.margin.cos())?;
        let b = tape.scale(sin_t, aam.margin.sin())?;
        let phi = tape.sub(a, b)?;

        let clamped = tape.value(cos_t).item()? < (std::f64::consts::PI - aam.margin).cos();
        let (mask_v, off_v) = if clamped { (0.0, -1.0) } else { (1.0, 0.0) };
        let mask = tape.leaf(Tensor::scalar(mask_v)?);
        let off = tape.leaf(Tensor::scalar(off_v)?);
        let phi_masked = tape.mul(phi, mask)?;
        let phi_eff = tape.add(phi_masked, off)?;

        let others = tape.mul(cos, keep)?;
        let target_part = tape.mul(one_hot, phi_eff)?;
        let combined = tape.add(others, target_part)?;
        tape.scale(combined, aam.scale)
    }

    /// Embedding and class probabilities in one pass:
    /// `[T, F] -> ([E], [C])`.
    pub fn classify(
        &self,
        tape: &mut Tape,
        features: NodeId,
        aam: &AamParams,
        target: Option<usize>,
    ) -> Result<(NodeId, NodeId)> {
        let emb = self.embed(tape, features)?;
        let logits = self.logits(tape, emb, aam, target)?;
        let probs = tape.softmax(logits)?;
        Ok((emb, probs))
    }
}

/// `1/x` for a strictly positive tape value, composed as `exp(-log(x))`.
fn recip_positive(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let lg = tape.log(x)?;
    let neg = tape.scale(lg, -1.0)?;
    tape.exp(neg)
}

/// Sliding-window expansion: `[T, D] -> [T - context + 1, context * D]`,
/// built from time slices concatenated on the feature axis. A context of 1
/// returns the input unchanged.
fn window(tape: &mut Tape, h: NodeId, context: usize) -> Result<NodeId> {
    if context == 1 {
        return Ok(h);
    }
    let t = tape.value(h).shape()[0];
    if t < context {
        return Err(Error::shape("forward", format!("too few frames: {t} < context {context}")));
    }
    let out_t = t - context + 1;
    let mut acc = tape.slice_time(h, 0, out_t)?;
    for offset in 1..context {
        let piece = tape.slice_time(h, offset, out_t)?;
        acc = tape.concat_last(acc, piece)?;
    }
    Ok(acc)
}

/// Statistics pooling graph: per-dimension mean and population standard
/// deviation over time, concatenated: `[T, D] -> [2D]`. The variance is
/// floored at `1e-10` before the square root.
fn stats_pool_graph(tape: &mut Tape, frames: NodeId) -> Result<NodeId> {
    let shape = tape.value(frames).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("stats-pooling", format!("expected rank 2, got {shape:?}")));
    }
    let d = shape[1];
    let mean = tape.reduce_mean(frames, Some(0))?;
    let centered = tape.sub(frames, mean)?;
    let sq = tape.square(centered)?;
    let var = tape.reduce_mean(sq, Some(0))?;
    // max(var, floor) = relu(var - floor) + floor.
    let floor = tape.leaf(Tensor::new(vec![d], vec![VAR_FLOOR; d])?);
    let shifted = tape.sub(var, floor)?;
    let pos = tape.relu(shifted)?;
    let floored = tape.add(pos, floor)?;
    let std = tape.sqrt(floored)?;
    tape.concat_last(mean, std)
}

// ── Plain-tensor wrappers ────────────────────────────────────────────────

/// Statistics pooling on a plain tensor: `[T, D] -> [2D]`.
pub fn stats_pooling(frames: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(frames.clone());
    let out = stats_pool_graph(&mut tape, x)?;
    Ok(tape.value(out).clone())
}

/// Embedding of a feature matrix: `[T, F] -> [E]`.
pub fn forward_embed(model: &Model, features: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let staged = model.stage(&mut tape);
    let x = tape.leaf(features.clone());
    let emb = staged.embed(&mut tape, x)?;
    Ok(tape.value(emb).clone())
}

/// Cosine or margin logits for an embedding: `[E] -> [C]`.
pub fn aam_logits(model: &Model, embedding: &Tensor, aam: &AamParams, target: Option<usize>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let staged = model.stage(&mut tape);
    let e = tape.leaf(embedding.clone());
    let logits = staged.logits(&mut tape, e, aam, target)?;
    Ok(tape.value(logits).clone())
}

/// Class probabilities for a feature matrix: `[T, F] -> [C]`.
pub fn forward_classify(model: &Model, features: &Tensor, aam: &AamParams, target: Option<usize>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let staged = model.stage(&mut tape);
    let x = tape.leaf(features.clone());
    let (_, probs) = staged.classify(&mut tape, x, aam, target)?;
    Ok(tape.value(probs).clone())
}

// ── Checkpoints ──────────────────────────────────────────────────────────
//
// A checkpoint is a count line followed by one text tensor dump per named
// parameter, in declaration order.

/// Serialise a model's parameters.
pub fn save_checkpoint<W: Write>(w: &mut W, model: &Model) -> std::io::Result<()> {
    writeln!(w, "{}", model.params.len())?;
    for (name, t) in &model.params {
        write_dump(w, name, t)?;
    }
    Ok(())
}

/// Load a checkpoint against a spec, validating parameter names and shapes.
pub fn load_checkpoint<R: BufRead>(spec: &ModelSpec, r: R) -> Result<Model> {
    let mut tr = TokenReader::new(r);
    let count = tr.usize_token("checkpoint")?;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let (name, t) = read_dump_tokens(&mut tr)?;
        params.push((name, t));
    }
    Model::from_parts(spec.clone(), params)
}
