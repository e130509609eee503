//! Verification scoring and saliency-faithfulness analysis: cosine trial
//! scores, equal error rate, minimum detection cost, and frame-occlusion
//! insertion/deletion curves.
//!
//! ## Threshold convention
//!
//! EER and minDCF sweep a decision threshold over every distinct score.
//! At a threshold t, a non-target trial counts as a false accept when its
//! score is strictly above t, and a target trial counts as a false reject
//! when its score is strictly below t — trials scoring exactly t are errors
//! for neither side. The sweep visits thresholds in ascending order; the
//! equal-error point is the first threshold minimising |FAR - FRR| (ties
//! therefore resolve to the lowest threshold), and the EER is the midpoint
//! of the two rates there. Under this convention the reference case
//! targets {0.9, 0.8} / non-targets {0.85, 0.1} yields an EER of exactly
//! 0.25 at threshold 0.1, and anti-correlated scores (every target below
//! every non-target) yield 0.75 — the crossover operating point with both
//! rates at 1 lies strictly between two observed scores, which this sweep
//! by design never visits.

use crate::attribution::{mean_time_baseline, time_weight_curve, Saliency};
use crate::error::{Error, Result};
use crate::models::{forward_classify, AamParams, Model};
use crate::tensor::Tensor;

/// Scores with their trial labels (`true` = same-speaker target trial).
#[derive(Debug, Clone)]
pub struct ScoreSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<ScoreSet> {
        if scores.len() != labels.len() {
            return Err(Error::shape("score-set", format!("{} scores vs {} labels", scores.len(), labels.len())));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("score-set", "scores must be finite"));
        }
        Ok(ScoreSet { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    fn split_sorted(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut targets = Vec::new();
        let mut nontargets = Vec::new();
        for (&s, &l) in self.scores.iter().zip(&self.labels) {
            if l {
                targets.push(s);
            } else {
                nontargets.push(s);
            }
        }
        if targets.is_empty() || nontargets.is_empty() {
            return Err(Error::invalid("score-set", "need at least one target and one non-target trial"));
        }
        targets.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        nontargets.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        Ok((targets, nontargets))
    }

    /// Ascending distinct thresholds with their (FAR, FRR) pairs.
    fn sweep(&self) -> Result<Vec<(f64, f64, f64)>> {
        let (targets, nontargets) = self.split_sorted()?;
        let mut thresholds: Vec<f64> = self.scores.clone();
        thresholds.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        thresholds.dedup();
        let out = thresholds
            .into_iter()
            .map(|t| {
                let fa = nontargets.len() - nontargets.partition_point(|&s| s <= t);
                let fr = targets.partition_point(|&s| s < t);
                (t, fa as f64 / nontargets.len() as f64, fr as f64 / targets.len() as f64)
            })
            .collect();
        Ok(out)
    }
}

/// Cosine similarity between two embeddings.
pub fn cosine_score(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 1 {
        return Err(Error::shape("cosine-score", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let na = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::domain("cosine-score", "zero-norm embedding"));
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Equal error rate and the threshold it occurs at.
pub fn compute_eer(s: &ScoreSet) -> Result<(f64, f64)> {
    let sweep = s.sweep()?;
    let mut best = None;
    for &(t, far, frr) in &sweep {
        let gap = (far - frr).abs();
        let better = match best {
            None => true,
            Some((_, _, _, best_gap)) => gap < best_gap,
        };
        if better {
            best = Some((t, far, frr, gap));
        }
    }
    let (t, far, frr, _) = best.expect("sweep is non-empty");
    Ok(((far + frr) / 2.0, t))
}

/// Minimum normalised detection cost over the threshold sweep.
pub fn compute_min_dcf(s: &ScoreSet, p_target: f64, c_miss: f64, c_fa: f64) -> Result<f64> {
    if !(p_target > 0.0 && p_target < 1.0) {
        return Err(Error::invalid("min-dcf", format!("p_target {p_target} must lie in (0, 1)")));
    }
    if !(c_miss > 0.0 && c_fa > 0.0) {
        return Err(Error::invalid("min-dcf", "costs must be positive"));
    }
    let sweep = s.sweep()?;
    let norm = (c_miss * p_target).min(c_fa * (1.0 - p_target));
    let mut best = f64::INFINITY;
    for &(_, far, frr) in &sweep {
        let dcf = c_miss * frr * p_target + c_fa * far * (1.0 - p_target);
        if dcf < best {
            best = dcf;
        }
    }
    Ok(best / norm)
}

// ── Occlusion analysis ───────────────────────────────────────────────────

/// Whether frames are being removed from the input or restored into the
/// baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcclusionMode {
    Insertion,
    Deletion,
}

impl OcclusionMode {
    pub fn name(self) -> &'static str {
        match self {
            OcclusionMode::Insertion => "insertion",
            OcclusionMode::Deletion => "deletion",
        }
    }
}

/// Model output traced along an occlusion fraction grid.
#[derive(Debug, Clone)]
pub struct OcclusionCurve {
    /// Increasing grid over [0, 1], starting at 0 and ending at 1.
    pub fractions: Vec<f64>,
    /// Target-class probability at each fraction.
    pub values: Vec<f64>,
    pub mode: OcclusionMode,
}

impl OcclusionCurve {
    pub fn new(fractions: Vec<f64>, values: Vec<f64>, mode: OcclusionMode) -> Result<OcclusionCurve> {
        if fractions.len() != values.len() || fractions.len() < 2 {
            return Err(Error::shape(
                "occlusion-curve",
                format!("{} fractions vs {} values", fractions.len(), values.len()),
            ));
        }
        if fractions[0] != 0.0 || *fractions.last().unwrap() != 1.0 {
            return Err(Error::invalid("occlusion-curve", "fraction grid must run from 0 to 1"));
        }
        if fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("occlusion-curve", "fractions must increase"));
        }
        if values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("occlusion-curve", "values must lie in [0, 1]"));
        }
        Ok(OcclusionCurve { fractions, values, mode })
    }
}

/// Frame indices ordered by time weight, heaviest first, ties broken by
/// ascending frame index.
pub fn occlusion_order(s: &Saliency) -> Vec<usize> {
    let curve = time_weight_curve(s);
    let mut order: Vec<usize> = (0..curve.len()).collect();
    order.sort_by(|&a, &b| curve[b].partial_cmp(&curve[a]).expect("finite weights").then(a.cmp(&b)));
    order
}

/// Input with the first `k` frames of `order` taken from `replacement`
/// instead of `x`.
fn splice_frames(x: &Tensor, replacement: &Tensor, order: &[usize], k: usize) -> Tensor {
    let mut out = x.clone();
    let f = x.shape()[1];
    for &frame in &order[..k] {
        let src = &replacement.data()[frame * f..(frame + 1) * f];
        out.data_mut()[frame * f..(frame + 1) * f].copy_from_slice(src);
    }
    out
}

/// Probability vectors along the occlusion grid. The untouched-input and
/// full-baseline passes are computed once and placed directly into their
/// endpoint slots, so insertion and deletion curves built from the same
/// sweep share those values bit-for-bit.
pub fn occlusion_sweep(
    model: &Model,
    aam: &AamParams,
    x: &Tensor,
    saliency: &Saliency,
    steps: usize,
    mode: OcclusionMode,
) -> Result<(Vec<f64>, Vec<Tensor>)> {
    if saliency.map.shape() != x.shape() {
        return Err(Error::shape(
            "occlusion",
            format!("saliency {:?} vs input {:?}", saliency.map.shape(), x.shape()),
        ));
    }
    if steps == 0 {
        return Err(Error::invalid("occlusion", "step count must be positive"));
    }
    let t = x.shape()[0];
    let baseline = mean_time_baseline(x)?;
    let order = occlusion_order(saliency);
    let p_input = forward_classify(model, x, aam, None)?;
    let p_baseline = forward_classify(model, &baseline, aam, None)?;

    let mut fractions = Vec::with_capacity(steps + 1);
    let mut probs = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let p = i as f64 / steps as f64;
        fractions.push(p);
        let k = (p * t as f64).round() as usize;
        let vec = match (mode, k) {
            (OcclusionMode::Deletion, 0) => p_input.clone(),
            (OcclusionMode::Deletion, k) if k == t => p_baseline.clone(),
            (OcclusionMode::Insertion, 0) => p_baseline.clone(),
            (OcclusionMode::Insertion, k) if k == t => p_input.clone(),
            (OcclusionMode::Deletion, k) => forward_classify(model, &splice_frames(x, &baseline, &order, k), aam, None)?,
            (OcclusionMode::Insertion, k) => forward_classify(model, &splice_frames(&baseline, x, &order, k), aam, None)?,
        };
        probs.push(vec);
    }
    Ok((fractions, probs))
}

/// Target-class probability as the heaviest frames are replaced by the
/// baseline, from the untouched input (fraction 0) to the full baseline
/// (fraction 1).
pub fn deletion_curve(
    model: &Model,
    aam: &AamParams,
    x: &Tensor,
    saliency: &Saliency,
    target: usize,
    steps: usize,
) -> Result<OcclusionCurve> {
    let (fractions, probs) = occlusion_sweep(model, aam, x, saliency, steps, OcclusionMode::Deletion)?;
    let values = extract_class(&probs, target)?;
    OcclusionCurve::new(fractions, values, OcclusionMode::Deletion)
}

/// Target-class probability as the heaviest frames are restored into the
/// baseline, from the full baseline (fraction 0) to the untouched input
/// (fraction 1).
pub fn insertion_curve(
    model: &Model,
    aam: &AamParams,
    x: &Tensor,
    saliency: &Saliency,
    target: usize,
    steps: usize,
) -> Result<OcclusionCurve> {
    let (fractions, probs) = occlusion_sweep(model, aam, x, saliency, steps, OcclusionMode::Insertion)?;
    let values = extract_class(&probs, target)?;
    OcclusionCurve::new(fractions, values, OcclusionMode::Insertion)
}

fn extract_class(probs: &[Tensor], target: usize) -> Result<Vec<f64>> {
    probs
        .iter()
        .map(|p| {
            p.data()
                .get(target)
                .copied()
                .ok_or_else(|| Error::invalid("occlusion target", format!("class {target} out of 0..{}", p.numel())))
        })
        .collect()
}

/// Trapezoidal integral of a curve over its fraction grid.
pub fn curve_auc(c: &OcclusionCurve) -> f64 {
    c.fractions
        .windows(2)
        .zip(c.values.windows(2))
        .map(|(f, v)| (f[1] - f[0]) * (v[0] + v[1]) / 2.0)
        .sum()
}
