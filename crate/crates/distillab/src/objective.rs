//! Training objectives behind a common strategy interface.
//!
//! Every method — plain classifier training and the five distillation
//! variants — implements [`Objective`]: given a minibatch it returns the
//! loss value and the gradient for each student parameter. Methods are
//! registered by name and selected at runtime, so the trainer and the CLI
//! are indifferent to which objective is running.
//!
//! All methods share the same structure: a margin-mode cross-entropy term
//! on the short segments plus `eta` times a method-specific alignment term
//! computed against a frozen teacher. The teacher's outputs always enter
//! as constants, so gradients flow only into the student.

use std::collections::BTreeMap;
use std::sync::Mutex;

use crate::attribution::{integrated_inputs, mean_time_baseline};
use crate::error::{Error, Result};
use crate::losses::{graph, probs_from_logits, EmbeddingMetric};
use crate::models::{AamParams, Model, StagedModel};
use crate::tensor::{NodeId, Tape, Tensor};

/// Runtime knobs for a distillation run.
#[derive(Debug, Clone)]
pub struct DistillConfig {
    /// Registered objective name.
    pub method: String,
    /// Weight on the alignment term.
    pub eta: f64,
    /// Ladder step count for integrated-input alignment.
    pub ig_steps: usize,
    /// Frames in the long segment fed to the ladder.
    pub long_frames: usize,
    /// Softmax temperature applied to both sides of every
    /// teacher-student KL comparison. 1 leaves the probabilities
    /// untouched; cross-entropy and Gram terms always use temperature 1.
    pub temperature: f64,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if method_names().iter().all(|&n| n != self.method) {
            return Err(Error::invalid(
                "distillation method",
                format!("{:?} is not one of {}", self.method, method_names().join(", ")),
            ));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("eta", format!("{} must be finite and non-negative", self.eta)));
        }
        if self.ig_steps == 0 {
            return Err(Error::invalid("ig-steps", "ladder step count must be at least 1"));
        }
        if self.long_frames == 0 {
            return Err(Error::invalid("long-frames", "long segment length must be positive"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature", format!("{} must be finite and positive", self.temperature)));
        }
        Ok(())
    }
}

/// One training example as the trainer hands it to an objective.
#[derive(Debug, Clone)]
pub struct BatchItem {
    /// Stable index of the source utterance within the training split.
    pub utterance_index: usize,
    pub label: usize,
    /// Short segment, the classification input.
    pub short: Tensor,
    /// Long segment for ladder alignment; only populated for objectives
    /// that report `uses_long_segments`.
    pub long: Option<Tensor>,
    /// Whether `long` covers the whole utterance, making frozen-teacher
    /// outputs on its ladder reusable across epochs.
    pub long_is_full: bool,
}

/// Frozen-teacher outputs keyed by (utterance index, ladder step). Entries
/// are only ever inserted for full-utterance long segments, whose ladder
/// inputs are identical every epoch.
#[derive(Debug, Default)]
pub struct TeacherCache {
    map: Mutex<BTreeMap<(usize, usize), (Tensor, Tensor)>>,
}

impl TeacherCache {
    pub fn new() -> TeacherCache {
        TeacherCache::default()
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get_or_compute(
        &self,
        key: (usize, usize),
        compute: impl FnOnce() -> Result<(Tensor, Tensor)>,
    ) -> Result<(Tensor, Tensor)> {
        let mut map = self.map.lock().expect("cache lock");
        if let Some(hit) = map.get(&key) {
            return Ok(hit.clone());
        }
        let fresh = compute()?;
        map.insert(key, fresh.clone());
        Ok(fresh)
    }
}

/// Everything an objective sees for one minibatch.
pub struct BatchContext<'a> {
    pub student: &'a Model,
    pub teacher: Option<&'a Model>,
    pub aam: &'a AamParams,
    pub cfg: &'a DistillConfig,
    pub items: &'a [BatchItem],
    pub cache: Option<&'a TeacherCache>,
}

impl BatchContext<'_> {
    fn teacher(&self) -> Result<&Model> {
        self.teacher.ok_or_else(|| Error::invalid("teacher", "this objective needs a frozen teacher model"))
    }
}

/// A training objective: loss value plus per-parameter student gradients
/// for one minibatch. Gradients align with `Model::params` order.
pub trait Objective {
    fn name(&self) -> &'static str;
    fn default_eta(&self) -> f64;
    fn requires_teacher(&self) -> bool;
    /// Whether batch items must carry long segments for ladder alignment.
    fn uses_long_segments(&self) -> bool {
        false
    }
    fn batch_loss(&self, ctx: &BatchContext) -> Result<(f64, Vec<Tensor>)>;
}

/// All objectives, keyed by their registered names.
pub fn registry() -> BTreeMap<&'static str, Box<dyn Objective>> {
    let list: Vec<Box<dyn Objective>> = vec![
        Box::new(Baseline),
        Box::new(VanillaKd),
        Box::new(EmbeddingKd { metric: EmbeddingMetric::L2 }),
        Box::new(EmbeddingKd { metric: EmbeddingMetric::Cos }),
        Box::new(MultiLevel),
        Box::new(Iml),
    ];
    list.into_iter().map(|o| (o.name(), o)).collect()
}

/// Registered objective names, alphabetical.
pub fn method_names() -> Vec<&'static str> {
    registry().into_keys().collect()
}

pub fn objective_by_name(name: &str) -> Result<Box<dyn Objective>> {
    registry().remove(name).ok_or_else(|| {
        Error::invalid("distillation method", format!("{name:?} is not one of {}", method_names().join(", ")))
    })
}

// ── Shared graph plumbing ────────────────────────────────────────────────

/// Mean of scalar nodes.
fn mean_of(tape: &mut Tape, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = tape.add(acc, n)?;
    }
    tape.scale(acc, 1.0 / nodes.len() as f64)
}

/// Margin-mode cross-entropy node for one item: embed, margin logits on
/// the item's label, softmax, negative log-probability.
fn ce_node(tape: &mut Tape, staged: &StagedModel, aam: &AamParams, item: &BatchItem) -> Result<(NodeId, NodeId)> {
    let x = tape.leaf(item.short.clone());
    let emb = staged.embed(tape, x)?;
    let logits = staged.logits(tape, emb, aam, Some(item.label))?;
    let probs = tape.softmax(logits)?;
    let ce = graph::cross_entropy(tape, probs, item.label)?;
    Ok((emb, ce))
}

/// No-margin probability node from an embedding, optionally tempered.
fn kd_probs_node(tape: &mut Tape, staged: &StagedModel, aam: &AamParams, emb: NodeId, temperature: f64) -> Result<NodeId> {
    let logits = staged.logits(tape, emb, aam, None)?;
    let scaled = if temperature == 1.0 { logits } else { tape.scale(logits, 1.0 / temperature)? };
    tape.softmax(scaled)
}

/// Frozen forward pass: no-margin logits and the embedding, as plain
/// tensors with no gradient entries.
pub fn frozen_outputs(model: &Model, features: &Tensor, aam: &AamParams) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let staged = model.stage(&mut tape);
    let x = tape.leaf(features.clone());
    let emb = staged.embed(&mut tape, x)?;
    let logits = staged.logits(&mut tape, emb, aam, None)?;
    Ok((tape.value(logits).clone(), tape.value(emb).clone()))
}

/// Loss value and per-parameter gradients from a scalar loss node.
fn grads_from(tape: &Tape, staged: &StagedModel, model: &Model, loss: NodeId) -> Result<(f64, Vec<Tensor>)> {
    let value = tape.value(loss).item()?;
    let gm = tape.backward(loss)?;
    let grads = staged
        .param_ids()
        .iter()
        .zip(model.params())
        .map(|(&id, (_, p))| gm.get_or_zeros(id, p.shape()))
        .collect();
    Ok((value, grads))
}

/// `acc += c * g`, elementwise, for aligned gradient lists.
fn add_scaled(acc: &mut [Tensor], grads: &[Tensor], c: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
            *av += c * gv;
        }
    }
}

/// Mean margin-mode cross-entropy over the batch with its gradients. Used
/// verbatim by plain training and as the classification term of
/// ladder-aligned distillation, so the two match bit for bit when the
/// alignment weight is zero.
fn ce_mean_with_grads(model: &Model, aam: &AamParams, items: &[BatchItem]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let staged = model.stage(&mut tape);
    let mut terms = Vec::with_capacity(items.len());
    for item in items {
        let (_, ce) = ce_node(&mut tape, &staged, aam, item)?;
        terms.push(ce);
    }
    let loss = mean_of(&mut tape, &terms)?;
    grads_from(&tape, &staged, model, loss)
}

fn check_items(ctx: &BatchContext) -> Result<()> {
    if ctx.items.is_empty() {
        return Err(Error::invalid("batch", "empty minibatch"));
    }
    Ok(())
}

// ── The six objectives ───────────────────────────────────────────────────

/// Plain classifier training: mean margin-mode cross-entropy.
struct Baseline;

impl Objective for Baseline {
    fn name(&self) -> &'static str {
        "baseline"
    }

    fn default_eta(&self) -> f64 {
        0.0
    }

    fn requires_teacher(&self) -> bool {
        false
    }

    fn batch_loss(&self, ctx: &BatchContext) -> Result<(f64, Vec<Tensor>)> {
        check_items(ctx)?;
        ce_mean_with_grads(ctx.student, ctx.aam, ctx.items)
    }
}

/// Soft-target distillation: mean of `CE + eta * KL(teacher || student)`,
/// the KL taken between no-margin probabilities on the short segment.
struct VanillaKd;

impl Objective for VanillaKd {
    fn name(&self) -> &'static str {
        "vanilla-kd"
    }

    fn default_eta(&self) -> f64 {
        9.0
    }

    fn requires_teacher(&self) -> bool {
        true
    }

    fn batch_loss(&self, ctx: &BatchContext) -> Result<(f64, Vec<Tensor>)> {
        check_items(ctx)?;
        let teacher = ctx.teacher()?;
        if ctx.cfg.eta == 0.0 {
            return ce_mean_with_grads(ctx.student, ctx.aam, ctx.items);
        }
        let mut tape = Tape::new();
        let staged = ctx.student.stage(&mut tape);
        let mut terms = Vec::with_capacity(ctx.items.len());
        for item in ctx.items {
            let (emb, ce) = ce_node(&mut tape, &staged, ctx.aam, item)?;
            let s_probs = kd_probs_node(&mut tape, &staged, ctx.aam, emb, ctx.cfg.temperature)?;
            let (t_logits, _) = frozen_outputs(teacher, &item.short, ctx.aam)?;
            let t_probs = probs_from_logits(&t_logits, ctx.cfg.temperature)?;
            let kl = graph::kl_from_fixed(&mut tape, &t_probs, s_probs)?;
            let weighted = tape.scale(kl, ctx.cfg.eta)?;
            terms.push(tape.add(ce, weighted)?);
        }
        let loss = mean_of(&mut tape, &terms)?;
        grads_from(&tape, &staged, ctx.student, loss)
    }
}

/// Embedding distillation: mean of `CE + eta * D(teacher-emb, student-emb)`
/// with D either the per-dimension mean squared difference or one minus
/// the cosine similarity.
struct EmbeddingKd {
    metric: EmbeddingMetric,
}

impl Objective for EmbeddingKd {
    fn name(&self) -> &'static str {
        match self.metric {
            EmbeddingMetric::L2 => "emb-l2",
            EmbeddingMetric::Cos => "emb-cos",
        }
    }

    fn default_eta(&self) -> f64 {
        match self.metric {
            EmbeddingMetric::L2 => 1.0,
            EmbeddingMetric::Cos => 20.0,
        }
    }

    fn requires_teacher(&self) -> bool {
        true
    }

    fn batch_loss(&self, ctx: &BatchContext) -> Result<(f64, Vec<Tensor>)> {
        check_items(ctx)?;
        let teacher = ctx.teacher()?;
        if ctx.cfg.eta == 0.0 {
            return ce_mean_with_grads(ctx.student, ctx.aam, ctx.items);
        }
        let mut tape = Tape::new();
        let staged = ctx.student.stage(&mut tape);
        let mut terms = Vec::with_capacity(ctx.items.len());
        for item in ctx.items {
            let (emb, ce) = ce_node(&mut tape, &staged, ctx.aam, item)?;
            let (_, t_emb) = frozen_outputs(teacher, &item.short, ctx.aam)?;
            let d = match self.metric {
                EmbeddingMetric::L2 => graph::embedding_l2(&mut tape, &t_emb, emb)?,
                EmbeddingMetric::Cos => graph::embedding_cos(&mut tape, &t_emb, emb)?,
            };
            let weighted = tape.scale(d, ctx.cfg.eta)?;
            terms.push(tape.add(ce, weighted)?);
        }
        let loss = mean_of(&mut tape, &terms)?;
        grads_from(&tape, &staged, ctx.student, loss)
    }
}

/// Multi-level alignment on the short segments: mean CE plus `eta` times
/// the sum of instance, class, and batch alignment terms.
struct MultiLevel;

impl Objective for MultiLevel {
    fn name(&self) -> &'static str {
        "multi-level"
    }

    fn default_eta(&self) -> f64 {
        9.0
    }

    fn requires_teacher(&self) -> bool {
        true
    }

    fn batch_loss(&self, ctx: &BatchContext) -> Result<(f64, Vec<Tensor>)> {
        check_items(ctx)?;
        let teacher = ctx.teacher()?;
        if ctx.cfg.eta == 0.0 {
            return ce_mean_with_grads(ctx.student, ctx.aam, ctx.items);
        }
        let mut tape = Tape::new();
        let staged = ctx.student.stage(&mut tape);
        let mut ce_terms = Vec::with_capacity(ctx.items.len());
        let mut s_nodes = Vec::with_capacity(ctx.items.len());
        let mut t_outputs = Vec::with_capacity(ctx.items.len());
        for item in ctx.items {
            let (emb, ce) = ce_node(&mut tape, &staged, ctx.aam, item)?;
            let probs = kd_probs_node(&mut tape, &staged, ctx.aam, emb, 1.0)?;
            ce_terms.push(ce);
            s_nodes.push((emb, probs));
            let (t_logits, t_emb) = frozen_outputs(teacher, &item.short, ctx.aam)?;
            t_outputs.push((t_logits, t_emb));
        }
        let ml = ml_graph(&mut tape, &staged, ctx, &s_nodes, &t_outputs)?;
        let ce = mean_of(&mut tape, &ce_terms)?;
        let weighted = tape.scale(ml, ctx.cfg.eta)?;
        let loss = tape.add(ce, weighted)?;
        grads_from(&tape, &staged, ctx.student, loss)
    }
}

/// Instance + class + batch alignment of on-tape student outputs against
/// frozen teacher outputs. `s_nodes` holds per-item (embedding, untempered
/// probability) nodes; `t_outputs` the matching (no-margin logits,
/// embedding) tensors.
fn ml_graph(
    tape: &mut Tape,
    staged: &StagedModel,
    ctx: &BatchContext,
    s_nodes: &[(NodeId, NodeId)],
    t_outputs: &[(Tensor, Tensor)],
) -> Result<NodeId> {
    let _ = staged;
    let temperature = ctx.cfg.temperature;
    // Instance level: per-item KL (tempered on both sides) plus embedding
    // mean squared difference.
    let mut inst_terms = Vec::with_capacity(s_nodes.len());
    for ((emb, probs), (t_logits, t_emb)) in s_nodes.iter().zip(t_outputs) {
        let s_kl_probs = if temperature == 1.0 {
            *probs
        } else {
            // Rebuild from the same embedding at the configured temperature.
            kd_probs_node(tape, staged, ctx.aam, *emb, temperature)?
        };
        let t_probs = probs_from_logits(t_logits, temperature)?;
        let kl = graph::kl_from_fixed(tape, &t_probs, s_kl_probs)?;
        let l2 = graph::embedding_l2(tape, t_emb, *emb)?;
        inst_terms.push(tape.add(kl, l2)?);
    }
    let instance = mean_of(tape, &inst_terms)?;

    // Stack per-item outputs into matrices for the Gram terms.
    let prob_ids: Vec<NodeId> = s_nodes.iter().map(|&(_, p)| p).collect();
    let emb_ids: Vec<NodeId> = s_nodes.iter().map(|&(e, _)| e).collect();
    let s_probs_mat = tape.stack_rows(&prob_ids)?;
    let s_emb_mat = tape.stack_rows(&emb_ids)?;
    let t_prob_rows: Vec<Vec<f64>> =
        t_outputs.iter().map(|(l, _)| Ok(probs_from_logits(l, 1.0)?.data().to_vec())).collect::<Result<_>>()?;
    let t_emb_rows: Vec<Vec<f64>> = t_outputs.iter().map(|(_, e)| e.data().to_vec()).collect();
    let t_probs_mat = Tensor::from_rows(&t_prob_rows)?;
    let t_emb_mat = Tensor::from_rows(&t_emb_rows)?;

    let class = graph::class_level(tape, &t_probs_mat, s_probs_mat)?;
    let batch = graph::batch_level(tape, &t_probs_mat, &t_emb_mat, s_probs_mat, s_emb_mat)?;
    let sum = tape.add(batch, class)?;
    tape.add(sum, instance)
}

/// Ladder-aligned multi-level distillation: margin-mode CE on the short
/// segment plus `eta` times the mean, over the interpolation ladder of the
/// long segment, of the multi-level alignment loss. The ladder baseline is
/// the long segment's own per-dimension time mean.
struct Iml;

impl Objective for Iml {
    fn name(&self) -> &'static str {
        "iml"
    }

    fn default_eta(&self) -> f64 {
        9.0
    }

    fn requires_teacher(&self) -> bool {
        true
    }

    fn uses_long_segments(&self) -> bool {
        true
    }

    fn batch_loss(&self, ctx: &BatchContext) -> Result<(f64, Vec<Tensor>)> {
        check_items(ctx)?;
        let (ce_value, mut grads) = ce_mean_with_grads(ctx.student, ctx.aam, ctx.items)?;
        if ctx.cfg.eta == 0.0 {
            return Ok((ce_value, grads));
        }
        let teacher = ctx.teacher()?;
        let m = ctx.cfg.ig_steps;

        // Interpolation ladders of every long segment, from its own
        // time-mean baseline up to the segment itself.
        let mut ladders = Vec::with_capacity(ctx.items.len());
        for item in ctx.items {
            let long = item
                .long
                .as_ref()
                .ok_or_else(|| Error::invalid("batch", "ladder alignment needs long segments"))?;
            let baseline = mean_time_baseline(long)?;
            ladders.push(integrated_inputs(long, &baseline, m)?);
        }

        let mut kd_sum = 0.0;
        for k in 1..=m {
            let mut tape = Tape::new();
            let staged = ctx.student.stage(&mut tape);
            let mut s_nodes = Vec::with_capacity(ctx.items.len());
            let mut t_outputs = Vec::with_capacity(ctx.items.len());
            for (item, ladder) in ctx.items.iter().zip(&ladders) {
                let step = &ladder.steps[k - 1];
                let x = tape.leaf(step.clone());
                let emb = staged.embed(&mut tape, x)?;
                let probs = kd_probs_node(&mut tape, &staged, ctx.aam, emb, 1.0)?;
                s_nodes.push((emb, probs));
                let compute = || frozen_outputs(teacher, step, ctx.aam);
                let t_out = match (item.long_is_full, ctx.cache) {
                    (true, Some(cache)) => cache.get_or_compute((item.utterance_index, k), compute)?,
                    _ => compute()?,
                };
                t_outputs.push(t_out);
            }
            let ml = ml_graph(&mut tape, &staged, ctx, &s_nodes, &t_outputs)?;
            let (ml_value, ml_grads) = grads_from(&tape, &staged, ctx.student, ml)?;
            kd_sum += ml_value;
            add_scaled(&mut grads, &ml_grads, ctx.cfg.eta / m as f64);
        }
        let kd_mean = kd_sum / m as f64;
        Ok((ce_value + ctx.cfg.eta * kd_mean, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::ml_loss;
    use crate::losses::BatchOutputs;
    use crate::models::{build_model, ModelSpec};
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn tiny_spec() -> ModelSpec {
        ModelSpec { input_dim: 3, frame_widths: vec![4], contexts: vec![3], embed_dim: 4, num_classes: 4 }
    }

    fn cfg(method: &str, eta: f64) -> DistillConfig {
        DistillConfig { method: method.into(), eta, ig_steps: 2, long_frames: 12, temperature: 1.0 }
    }

    fn rand_features(t: usize, f: usize, seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        let data: Vec<f64> = (0..t * f).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![t, f], data).unwrap()
    }

    fn make_items(n: usize, with_long: bool, seed: u64) -> Vec<BatchItem> {
        (0..n)
            .map(|i| BatchItem {
                utterance_index: i,
                label: i % 4,
                short: rand_features(8, 3, seed + i as u64),
                long: with_long.then(|| rand_features(12, 3, seed + 100 + i as u64)),
                long_is_full: false,
            })
            .collect()
    }

    #[test]
    fn registry_lists_the_six_methods() {
        assert_eq!(method_names(), vec!["baseline", "emb-cos", "emb-l2", "iml", "multi-level", "vanilla-kd"]);
        let reg = registry();
        assert!(!reg["baseline"].requires_teacher());
        for name in ["vanilla-kd", "emb-l2", "emb-cos", "multi-level", "iml"] {
            assert!(reg[name].requires_teacher(), "{name} needs a teacher");
        }
        assert_eq!(reg["emb-l2"].default_eta(), 1.0);
        assert_eq!(reg["emb-cos"].default_eta(), 20.0);
        for name in ["vanilla-kd", "multi-level", "iml"] {
            assert_eq!(reg[name].default_eta(), 9.0, "{name}");
        }
        assert!(reg["iml"].uses_long_segments());
        assert!(!reg["vanilla-kd"].uses_long_segments());
        assert!(objective_by_name("nope").is_err());
        assert!(cfg("nope", 1.0).validate().is_err());
        assert!(cfg("iml", -1.0).validate().is_err());
        assert!(cfg("iml", 1.0).validate().is_ok());
    }

    /// Every objective's reported gradients match central finite
    /// differences of its own loss value, through the full model.
    #[test]
    fn objective_gradients_match_finite_differences() {
        let spec = tiny_spec();
        let teacher = build_model(&spec, 7).unwrap();
        let student = build_model(&spec, 8).unwrap();
        let aam = AamParams::new(4.0, 0.15).unwrap();
        let items = make_items(3, true, 40);

        for (name, obj) in registry() {
            let c = cfg(name, if name == "baseline" { 0.0 } else { 0.7 });
            let ctx = BatchContext {
                student: &student,
                teacher: Some(&teacher),
                aam: &aam,
                cfg: &c,
                items: &items,
                cache: None,
            };
            let (_, grads) = obj.batch_loss(&ctx).unwrap();

            let eps = 1e-5;
            for p_idx in 0..student.params().len() {
                let n = student.params()[p_idx].1.numel();
                for coord in (0..n).step_by(3) {
                    let probe = |delta: f64| -> f64 {
                        let mut m = student.clone();
                        m.params_mut().nth(p_idx).unwrap().1.data_mut()[coord] += delta;
                        let ctx = BatchContext {
                            student: &m,
                            teacher: Some(&teacher),
                            aam: &aam,
                            cfg: &c,
                            items: &items,
                            cache: None,
                        };
                        obj.batch_loss(&ctx).unwrap().0
                    };
                    let fd = (probe(eps) - probe(-eps)) / (2.0 * eps);
                    let got = grads[p_idx].data()[coord];
                    let tol = 1e-4 * fd.abs().max(got.abs()) + 1e-7;
                    assert!(
                        (got - fd).abs() <= tol,
                        "{name}: param {p_idx} coord {coord}: backward {got} vs finite-difference {fd}"
                    );
                }
            }
        }
    }

    /// With a zero alignment weight, ladder distillation is bit-for-bit
    /// plain classifier training.
    #[test]
    fn iml_with_zero_eta_equals_baseline_bitwise() {
        let spec = tiny_spec();
        let teacher = build_model(&spec, 7).unwrap();
        let student = build_model(&spec, 8).unwrap();
        let aam = AamParams::new(4.0, 0.15).unwrap();
        let items = make_items(3, true, 41);

        let c_b = cfg("baseline", 0.0);
        let base_ctx =
            BatchContext { student: &student, teacher: None, aam: &aam, cfg: &c_b, items: &items, cache: None };
        let (base_loss, base_grads) = objective_by_name("baseline").unwrap().batch_loss(&base_ctx).unwrap();

        let c_i = cfg("iml", 0.0);
        let iml_ctx =
            BatchContext { student: &student, teacher: Some(&teacher), aam: &aam, cfg: &c_i, items: &items, cache: None };
        let (iml_loss, iml_grads) = objective_by_name("iml").unwrap().batch_loss(&iml_ctx).unwrap();

        assert_eq!(base_loss.to_bits(), iml_loss.to_bits());
        for (b, i) in base_grads.iter().zip(&iml_grads) {
            for (bv, iv) in b.data().iter().zip(i.data()) {
                assert_eq!(bv.to_bits(), iv.to_bits());
            }
        }
    }

    /// With one ladder step the alignment term is the multi-level loss at
    /// the long segment itself.
    #[test]
    fn iml_single_step_alignment_is_ml_at_the_long_input() {
        let spec = tiny_spec();
        let teacher = build_model(&spec, 7).unwrap();
        let student = build_model(&spec, 8).unwrap();
        let aam = AamParams::new(4.0, 0.15).unwrap();
        let items = make_items(3, true, 42);
        let eta = 0.7;

        let mut c = cfg("iml", eta);
        c.ig_steps = 1;
        let ctx =
            BatchContext { student: &student, teacher: Some(&teacher), aam: &aam, cfg: &c, items: &items, cache: None };
        let (total, _) = objective_by_name("iml").unwrap().batch_loss(&ctx).unwrap();

        let c_b = cfg("baseline", 0.0);
        let base_ctx =
            BatchContext { student: &student, teacher: None, aam: &aam, cfg: &c_b, items: &items, cache: None };
        let (ce, _) = objective_by_name("baseline").unwrap().batch_loss(&base_ctx).unwrap();

        // Multi-level loss on plain outputs at the full long segments.
        let outs = |model: &Model| -> BatchOutputs {
            let mut probs = Vec::new();
            let mut embs = Vec::new();
            for item in &items {
                let (logits, emb) = frozen_outputs(model, item.long.as_ref().unwrap(), &aam).unwrap();
                probs.push(probs_from_logits(&logits, 1.0).unwrap().data().to_vec());
                embs.push(emb.data().to_vec());
            }
            BatchOutputs::new(
                Tensor::from_rows(&probs).unwrap(),
                Tensor::from_rows(&embs).unwrap(),
                items.iter().map(|i| i.label).collect(),
            )
            .unwrap()
        };
        let ml = ml_loss(&outs(&teacher), &outs(&student)).unwrap();
        assert!(
            (total - (ce + eta * ml)).abs() <= 1e-12,
            "total {total} vs ce {ce} + eta*ml {}",
            eta * ml
        );
    }

    /// A student identical to its teacher, with the margin off, has a
    /// vanishing alignment term under every distillation objective.
    #[test]
    fn self_distillation_collapses_to_cross_entropy() {
        let spec = tiny_spec();
        let model = build_model(&spec, 9).unwrap();
        let aam = AamParams::new(4.0, 0.0).unwrap();
        let items = make_items(3, true, 43);

        let c_b = cfg("baseline", 0.0);
        let base_ctx =
            BatchContext { student: &model, teacher: None, aam: &aam, cfg: &c_b, items: &items, cache: None };
        let (ce, _) = objective_by_name("baseline").unwrap().batch_loss(&base_ctx).unwrap();

        for name in ["vanilla-kd", "emb-l2", "emb-cos", "multi-level", "iml"] {
            let c = cfg(name, 5.0);
            let ctx = BatchContext {
                student: &model,
                teacher: Some(&model),
                aam: &aam,
                cfg: &c,
                items: &items,
                cache: None,
            };
            let (total, _) = objective_by_name(name).unwrap().batch_loss(&ctx).unwrap();
            assert!((total - ce).abs() <= 1e-12, "{name}: {total} vs {ce}");
        }
    }

    /// The frozen-teacher cache only fills for full-length long segments,
    /// and reusing it does not change the result.
    #[test]
    fn teacher_cache_fills_only_for_full_segments_and_preserves_results() {
        let spec = tiny_spec();
        let teacher = build_model(&spec, 7).unwrap();
        let student = build_model(&spec, 8).unwrap();
        let aam = AamParams::new(4.0, 0.15).unwrap();
        let c = cfg("iml", 0.7);
        let obj = objective_by_name("iml").unwrap();

        let mut items = make_items(2, true, 44);
        let cache = TeacherCache::new();
        let ctx = |items: &[BatchItem], cache: Option<&TeacherCache>, student: &Model| -> (f64, Vec<Tensor>) {
            let ctx = BatchContext { student, teacher: Some(&teacher), aam: &aam, cfg: &c, items, cache };
            obj.batch_loss(&ctx).unwrap()
        };

        // Partial segments: nothing cached.
        let (plain_loss, _) = ctx(&items, Some(&cache), &student);
        assert!(cache.is_empty());

        // Full segments: one entry per item and ladder step, and the
        // second (cache-served) evaluation is identical bitwise.
        for item in &mut items {
            item.long_is_full = true;
        }
        let (first, grads_first) = ctx(&items, Some(&cache), &student);
        assert_eq!(cache.len(), 2 * c.ig_steps);
        let (second, grads_second) = ctx(&items, Some(&cache), &student);
        assert_eq!(first.to_bits(), second.to_bits());
        for (a, b) in grads_first.iter().zip(&grads_second) {
            assert_eq!(a.data(), b.data());
        }
        // Marking segments full doesn't change the value itself.
        assert_eq!(plain_loss.to_bits(), first.to_bits());
    }
}
