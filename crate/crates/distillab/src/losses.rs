//! Loss functions for classifier training and knowledge distillation.
//!
//! Everything here comes in two flavours that share one implementation:
//! graph builders in [`graph`] append nodes to a caller's [`Tape`] (used
//! during training, where gradients are needed), and the plain functions
//! run the same builders on a scratch tape and return values (used for
//! teacher-side constants, evaluation, and reporting). Because both
//! flavours execute identical node sequences, a quantity computed either
//! way is bitwise-identical — in particular, comparing a model against
//! itself gives exactly zero.
//!
//! The pieces:
//!
//! - cross-entropy `-ln(max(p[label], 1e-30))` on a probability vector;
//! - KL divergence `sum_j t_j (ln t_j - ln max(s_j, 1e-30))` from a fixed
//!   reference distribution `t` (with `0 ln 0 := 0`);
//! - embedding distances: mean squared difference over dimensions, and
//!   `1 - cosine`;
//! - similarity-structure losses over a batch, built from Gram matrices:
//!   class-level uses `Y^T Y` of the stacked probability rows `[B, C]`,
//!   batch-level uses `Y Y^T` together with the cosine Gram matrix of the
//!   stacked embeddings; each compares student against teacher by the mean
//!   Euclidean norm of the row differences.

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

/// Probabilities are clamped from below by this before any logarithm.
pub const PROB_FLOOR: f64 = 1e-30;

/// Inference-mode outputs of one model over a batch: stacked probability
/// rows `[B, C]`, stacked embeddings `[B, E]`, and the true labels.
#[derive(Debug, Clone)]
pub struct BatchOutputs {
    pub probs: Tensor,
    pub embeddings: Tensor,
    pub labels: Vec<usize>,
}

impl BatchOutputs {
    pub fn new(probs: Tensor, embeddings: Tensor, labels: Vec<usize>) -> Result<BatchOutputs> {
        if probs.rank() != 2 || embeddings.rank() != 2 {
            return Err(Error::shape(
                "batch-outputs",
                format!("probs {:?} and embeddings {:?} must be rank 2", probs.shape(), embeddings.shape()),
            ));
        }
        let b = probs.shape()[0];
        if b == 0 {
            return Err(Error::invalid("batch-outputs", "batch must be non-empty"));
        }
        if embeddings.shape()[0] != b || labels.len() != b {
            return Err(Error::shape(
                "batch-outputs",
                format!("{b} prob rows vs {} embedding rows vs {} labels", embeddings.shape()[0], labels.len()),
            ));
        }
        let c = probs.shape()[1];
        for i in 0..b {
            let s: f64 = probs.row(i).iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("batch-outputs", format!("probability row {i} sums to {s}")));
            }
            if labels[i] >= c {
                return Err(Error::invalid("batch-outputs", format!("label {} out of 0..{c}", labels[i])));
            }
        }
        Ok(BatchOutputs { probs, embeddings, labels })
    }

    pub fn batch_size(&self) -> usize {
        self.probs.shape()[0]
    }

    fn check_compatible(&self, other: &BatchOutputs, op: &'static str) -> Result<()> {
        if self.probs.shape() != other.probs.shape() || self.embeddings.shape() != other.embeddings.shape() {
            return Err(Error::shape(
                op,
                format!(
                    "probs {:?} vs {:?}, embeddings {:?} vs {:?}",
                    self.probs.shape(),
                    other.probs.shape(),
                    self.embeddings.shape(),
                    other.embeddings.shape()
                ),
            ));
        }
        Ok(())
    }
}

/// Which embedding distance to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingMetric {
    L2,
    Cos,
}

/// Softmax of `logits / temperature` on a plain rank-1 tensor.
pub fn probs_from_logits(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::invalid("temperature", format!("{temperature} must be positive")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(logits.clone());
    let scaled = tape.scale(x, 1.0 / temperature)?;
    let p = tape.softmax(scaled)?;
    Ok(tape.value(p).clone())
}

// ── Graph builders ───────────────────────────────────────────────────────

pub mod graph {
    use super::*;

    /// Elementwise `max(x, c)` for a constant floor `c`, as
    /// `relu(x - c) + c`. Values at or below the floor get zero gradient.
    pub fn floor_at(tape: &mut Tape, x: NodeId, c: f64) -> Result<NodeId> {
        let shape = tape.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let floor = tape.leaf(Tensor::new(shape, vec![c; n])?);
        let shifted = tape.sub(x, floor)?;
        let pos = tape.relu(shifted)?;
        tape.add(pos, floor)
    }

    /// `-ln(max(p[label], 1e-30))` for a probability vector node `[C]`.
    pub fn cross_entropy(tape: &mut Tape, probs: NodeId, label: usize) -> Result<NodeId> {
        let shape = tape.value(probs).shape().to_vec();
        if shape.len() != 1 {
            return Err(Error::shape("cross-entropy", format!("expected a probability vector, got {shape:?}")));
        }
        if label >= shape[0] {
            return Err(Error::invalid("cross-entropy label", format!("{label} out of 0..{}", shape[0])));
        }
        let mut one_hot = vec![0.0; shape[0]];
        one_hot[label] = 1.0;
        let one_hot = tape.leaf(Tensor::new(vec![shape[0]], one_hot)?);
        let picked = tape.mul(probs, one_hot)?;
        let p = tape.reduce_sum(picked, None)?;
        let floored = floor_at(tape, p, PROB_FLOOR)?;
        let lg = tape.log(floored)?;
        tape.scale(lg, -1.0)
    }

    /// KL divergence from a fixed distribution to a student probability
    /// node of the same rank-1 shape. The reference-side entropy enters as
    /// a constant, so gradients flow only through the student.
    pub fn kl_from_fixed(tape: &mut Tape, reference: &Tensor, student_probs: NodeId) -> Result<NodeId> {
        let s_shape = tape.value(student_probs).shape().to_vec();
        if reference.rank() != 1 || reference.shape() != s_shape.as_slice() {
            return Err(Error::shape(
                "kl-divergence",
                format!("reference {:?} vs student {:?}", reference.shape(), s_shape),
            ));
        }
        if reference.data().iter().any(|&v| v < 0.0) {
            return Err(Error::domain("kl-divergence", "negative reference probability"));
        }
        // sum_j t_j ln t_j, with 0 ln 0 := 0.
        let entropy: f64 = reference.data().iter().filter(|&&t| t > 0.0).map(|&t| t * t.ln()).sum();
        let floored = floor_at(tape, student_probs, PROB_FLOOR)?;
        let lg = tape.log(floored)?;
        let t_leaf = tape.leaf(reference.clone());
        let weighted = tape.mul(lg, t_leaf)?;
        let cross = tape.reduce_sum(weighted, None)?;
        let neg_cross = tape.scale(cross, -1.0)?;
        let ent = tape.leaf(Tensor::scalar(entropy)?);
        tape.add(neg_cross, ent)
    }

    /// Mean squared difference over dimensions between a fixed embedding
    /// and an embedding node of the same rank-1 shape.
    pub fn embedding_l2(tape: &mut Tape, reference: &Tensor, emb: NodeId) -> Result<NodeId> {
        let shape = tape.value(emb).shape().to_vec();
        if reference.rank() != 1 || reference.shape() != shape.as_slice() {
            return Err(Error::shape(
                "embedding-l2",
                format!("reference {:?} vs student {:?}", reference.shape(), shape),
            ));
        }
        let r = tape.leaf(reference.clone());
        let diff = tape.sub(emb, r)?;
        let sq = tape.square(diff)?;
        tape.reduce_mean(sq, None)
    }

    /// `1 - cosine(reference, emb)` for a fixed embedding and an embedding
    /// node of the same rank-1 shape. Both vectors must be nonzero.
    pub fn embedding_cos(tape: &mut Tape, reference: &Tensor, emb: NodeId) -> Result<NodeId> {
        let shape = tape.value(emb).shape().to_vec();
        if reference.rank() != 1 || reference.shape() != shape.as_slice() {
            return Err(Error::shape(
                "embedding-cos",
                format!("reference {:?} vs student {:?}", reference.shape(), shape),
            ));
        }
        let ref_norm = reference.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if ref_norm == 0.0 {
            return Err(Error::domain("embedding-cos", "zero-norm reference embedding"));
        }
        let r = tape.leaf(reference.clone());
        let prod = tape.mul(emb, r)?;
        let dot = tape.reduce_sum(prod, None)?;
        let sq = tape.square(emb)?;
        let norm_sq = tape.reduce_sum(sq, None)?;
        let norm = tape.sqrt(norm_sq)?;
        if tape.value(norm).item()? == 0.0 {
            return Err(Error::domain("embedding-cos", "zero-norm embedding"));
        }
        let inv = recip_positive(tape, norm)?;
        let scaled = tape.scale(dot, 1.0 / ref_norm)?;
        let cos = tape.mul(scaled, inv)?;
        let one = tape.leaf(Tensor::scalar(1.0)?);
        tape.sub(one, cos)
    }

    /// Class-similarity Gram matrix `Y^T Y` of stacked probability rows:
    /// `[B, C] -> [C, C]`.
    pub fn class_gram(tape: &mut Tape, probs_matrix: NodeId) -> Result<NodeId> {
        let yt = tape.transpose(probs_matrix)?;
        tape.matmul(yt, probs_matrix)
    }

    /// Batch-similarity Gram matrix `Y Y^T` of stacked probability rows:
    /// `[B, C] -> [B, B]`.
    pub fn batch_gram(tape: &mut Tape, probs_matrix: NodeId) -> Result<NodeId> {
        let yt = tape.transpose(probs_matrix)?;
        tape.matmul(probs_matrix, yt)
    }

    /// Cosine Gram matrix of stacked embeddings: rows are L2-normalised,
    /// then `E-hat E-hat^T`: `[B, E] -> [B, B]`. Every row must be nonzero.
    pub fn cosine_gram(tape: &mut Tape, emb_matrix: NodeId) -> Result<NodeId> {
        let shape = tape.value(emb_matrix).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("cosine-gram", format!("expected rank 2, got {shape:?}")));
        }
        let sq = tape.square(emb_matrix)?;
        let row_sq = tape.reduce_sum(sq, Some(1))?;
        let norms = tape.sqrt(row_sq)?;
        if tape.value(norms).data().contains(&0.0) {
            return Err(Error::domain("cosine-gram", "zero-norm embedding row"));
        }
        let inv = recip_positive(tape, norms)?;
        // Normalise by scaling column j of E^T by 1/||row j||, then undo
        // the transpose: rank-1 broadcasting acts on the trailing axis.
        let et = tape.transpose(emb_matrix)?;
        let scaled_t = tape.mul(et, inv)?;
        let normalised = tape.transpose(scaled_t)?;
        tape.matmul(normalised, scaled_t)
    }

    /// Mean Euclidean norm of the row differences between a fixed matrix
    /// and a matrix node of the same shape: `(1/R) sum_i ||row_i(a - b)||`.
    pub fn mean_row_norm_diff(tape: &mut Tape, fixed: &Tensor, node: NodeId) -> Result<NodeId> {
        let shape = tape.value(node).shape().to_vec();
        if fixed.rank() != 2 || fixed.shape() != shape.as_slice() {
            return Err(Error::shape(
                "row-norm-diff",
                format!("fixed {:?} vs node {:?}", fixed.shape(), shape),
            ));
        }
        let f = tape.leaf(fixed.clone());
        let diff = tape.sub(node, f)?;
        let sq = tape.square(diff)?;
        let row_sums = tape.reduce_sum(sq, Some(1))?;
        let norms = tape.sqrt(row_sums)?;
        tape.reduce_mean(norms, None)
    }

    /// Class-level similarity loss: mean row-norm difference between the
    /// teacher's and student's `Y^T Y` Gram matrices. `teacher_probs` is
    /// the fixed `[B, C]` matrix; `student_probs` is the matching node.
    pub fn class_level(tape: &mut Tape, teacher_probs: &Tensor, student_probs: NodeId) -> Result<NodeId> {
        let fixed = super::prob_gram(teacher_probs)?;
        let gram = class_gram(tape, student_probs)?;
        mean_row_norm_diff(tape, &fixed, gram)
    }

    /// Batch-level similarity loss: mean row-norm difference of the
    /// `Y Y^T` Gram matrices plus the same for the cosine Gram matrices of
    /// the embeddings.
    pub fn batch_level(
        tape: &mut Tape,
        teacher_probs: &Tensor,
        teacher_embs: &Tensor,
        student_probs: NodeId,
        student_embs: NodeId,
    ) -> Result<NodeId> {
        let fixed_y = super::batch_prob_gram(teacher_probs)?;
        let fixed_e = super::embedding_cosine_gram(teacher_embs)?;
        let gram_y = batch_gram(tape, student_probs)?;
        let y_term = mean_row_norm_diff(tape, &fixed_y, gram_y)?;
        let gram_e = cosine_gram(tape, student_embs)?;
        let e_term = mean_row_norm_diff(tape, &fixed_e, gram_e)?;
        tape.add(y_term, e_term)
    }

    /// `1/x` for a strictly positive node, composed as `exp(-log(x))`.
    fn recip_positive(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let lg = tape.log(x)?;
        let neg = tape.scale(lg, -1.0)?;
        tape.exp(neg)
    }
}

// ── Plain-value wrappers ─────────────────────────────────────────────────

fn eval_scalar(build: impl FnOnce(&mut Tape) -> Result<NodeId>) -> Result<f64> {
    let mut tape = Tape::new();
    let out = build(&mut tape)?;
    tape.value(out).item()
}

fn eval_tensor(build: impl FnOnce(&mut Tape) -> Result<NodeId>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let out = build(&mut tape)?;
    Ok(tape.value(out).clone())
}

/// `-ln(max(p[label], 1e-30))` on a plain probability vector.
pub fn cross_entropy(probs: &Tensor, label: usize) -> Result<f64> {
    eval_scalar(|tape| {
        let p = tape.leaf(probs.clone());
        graph::cross_entropy(tape, p, label)
    })
}

/// KL divergence from `reference` to `student`, both plain rank-1 tensors.
pub fn kl_div(reference: &Tensor, student: &Tensor) -> Result<f64> {
    eval_scalar(|tape| {
        let s = tape.leaf(student.clone());
        graph::kl_from_fixed(tape, reference, s)
    })
}

/// Embedding distance under the chosen metric.
pub fn embedding_loss(reference: &Tensor, emb: &Tensor, metric: EmbeddingMetric) -> Result<f64> {
    match metric {
        EmbeddingMetric::L2 => embedding_l2(reference, emb),
        EmbeddingMetric::Cos => embedding_cos(reference, emb),
    }
}

/// Mean squared difference over dimensions between two embeddings.
pub fn embedding_l2(reference: &Tensor, emb: &Tensor) -> Result<f64> {
    eval_scalar(|tape| {
        let e = tape.leaf(emb.clone());
        graph::embedding_l2(tape, reference, e)
    })
}

/// `1 - cosine` between two embeddings.
pub fn embedding_cos(reference: &Tensor, emb: &Tensor) -> Result<f64> {
    eval_scalar(|tape| {
        let e = tape.leaf(emb.clone());
        graph::embedding_cos(tape, reference, e)
    })
}

/// `Y^T Y` for a plain `[B, C]` matrix of stacked probability rows.
pub fn prob_gram(probs: &Tensor) -> Result<Tensor> {
    if probs.rank() != 2 {
        return Err(Error::shape("class-gram", format!("expected rank 2, got {:?}", probs.shape())));
    }
    eval_tensor(|tape| {
        let y = tape.leaf(probs.clone());
        graph::class_gram(tape, y)
    })
}

/// `Y Y^T` for a plain `[B, C]` matrix of stacked probability rows.
pub fn batch_prob_gram(probs: &Tensor) -> Result<Tensor> {
    if probs.rank() != 2 {
        return Err(Error::shape("batch-gram", format!("expected rank 2, got {:?}", probs.shape())));
    }
    eval_tensor(|tape| {
        let y = tape.leaf(probs.clone());
        graph::batch_gram(tape, y)
    })
}

/// Cosine Gram matrix of a plain `[B, E]` embedding matrix.
pub fn embedding_cosine_gram(embs: &Tensor) -> Result<Tensor> {
    eval_tensor(|tape| {
        let e = tape.leaf(embs.clone());
        graph::cosine_gram(tape, e)
    })
}

/// Class-level similarity loss between plain `[B, C]` probability stacks.
pub fn class_level_loss(teacher_probs: &Tensor, student_probs: &Tensor) -> Result<f64> {
    eval_scalar(|tape| {
        let y = tape.leaf(student_probs.clone());
        graph::class_level(tape, teacher_probs, y)
    })
}

/// Batch-level similarity loss between plain probability and embedding
/// stacks.
pub fn batch_level_loss(
    teacher_probs: &Tensor,
    teacher_embs: &Tensor,
    student_probs: &Tensor,
    student_embs: &Tensor,
) -> Result<f64> {
    eval_scalar(|tape| {
        let y = tape.leaf(student_probs.clone());
        let e = tape.leaf(student_embs.clone());
        graph::batch_level(tape, teacher_probs, teacher_embs, y, e)
    })
}

fn row_vec(m: &Tensor, i: usize) -> Tensor {
    Tensor::new(vec![m.cols()], m.row(i).to_vec()).expect("row of a finite matrix")
}

/// Mean over the batch of `cross_entropy + eta * kl_div` per utterance.
pub fn vanilla_kd_loss(student: &BatchOutputs, teacher: &BatchOutputs, eta: f64) -> Result<f64> {
    student.check_compatible(teacher, "vanilla-kd")?;
    let b = student.batch_size();
    let mut total = 0.0;
    for i in 0..b {
        let ys = row_vec(&student.probs, i);
        let yt = row_vec(&teacher.probs, i);
        total += cross_entropy(&ys, student.labels[i])? + eta * kl_div(&yt, &ys)?;
    }
    Ok(total / b as f64)
}

/// Mean over the batch of `kl_div + embedding-l2` per utterance.
pub fn instance_loss(teacher: &BatchOutputs, student: &BatchOutputs) -> Result<f64> {
    teacher.check_compatible(student, "instance-loss")?;
    let b = student.batch_size();
    let mut total = 0.0;
    for i in 0..b {
        let yt = row_vec(&teacher.probs, i);
        let ys = row_vec(&student.probs, i);
        let et = row_vec(&teacher.embeddings, i);
        let es = row_vec(&student.embeddings, i);
        total += kl_div(&yt, &ys)? + embedding_l2(&et, &es)?;
    }
    Ok(total / b as f64)
}

/// Class-level similarity loss over the stacked probabilities (embeddings
/// are not involved at this level).
pub fn class_loss(teacher: &BatchOutputs, student: &BatchOutputs) -> Result<f64> {
    teacher.check_compatible(student, "class-loss")?;
    class_level_loss(&teacher.probs, &student.probs)
}

/// Batch-level similarity loss over the stacked probabilities and
/// embeddings.
pub fn batch_loss(teacher: &BatchOutputs, student: &BatchOutputs) -> Result<f64> {
    teacher.check_compatible(student, "batch-loss")?;
    batch_level_loss(&teacher.probs, &teacher.embeddings, &student.probs, &student.embeddings)
}

/// Multi-level alignment loss: batch + class + instance.
pub fn ml_loss(teacher: &BatchOutputs, student: &BatchOutputs) -> Result<f64> {
    Ok(batch_loss(teacher, student)? + class_loss(teacher, student)? + instance_loss(teacher, student)?)
}
