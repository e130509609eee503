//! Minibatch gradient-descent training loop shared by every objective.
//!
//! Each epoch shuffles the training split with a seed derived from
//! (run seed, epoch), then draws one short-segment offset and one
//! long-segment offset per utterance. The draws are consumed in the same
//! order by every objective — including ones that never build the long
//! segment — so two runs with the same seed see identical batches no
//! matter which method is training. The long segment contains the short
//! one whenever the utterance leaves room for that.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::models::{forward_classify, AamParams, Model};
use crate::objective::{BatchContext, BatchItem, DistillConfig, Objective, TeacherCache};
use crate::rng::stream_rng;
use crate::synth::{crop_features, Utterance};

/// Optimisation knobs, independent of the objective.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Frames in the cropped classification segment.
    pub short_frames: usize,
    pub seed: u64,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate", format!("{} must be finite and positive", self.learning_rate)));
        }
        if self.short_frames == 0 {
            return Err(Error::invalid("short-frames", "must be positive"));
        }
        Ok(())
    }
}

/// Per-epoch mean batch loss, in order.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

/// One epoch's visit order and segment offsets, identical for every
/// objective at a given (seed, epoch, split, frame counts).
fn epoch_plan(
    split: &[Utterance],
    settings: &TrainSettings,
    long_frames: usize,
    epoch: usize,
) -> Vec<(usize, usize, usize)> {
    let mut rng = stream_rng(settings.seed, "epoch", &[epoch as u64]);
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.shuffle(&mut rng);
    order
        .into_iter()
        .map(|idx| {
            let t = split[idx].frames();
            let s = settings.short_frames;
            let short_off = rng.gen_range(0..=t - s);
            // Keep the long window over the short one when the utterance
            // allows it; otherwise any valid position.
            let long_off = if long_frames <= t {
                let lo = (short_off + s).saturating_sub(long_frames);
                let hi = short_off.min(t - long_frames);
                if lo <= hi {
                    rng.gen_range(lo..=hi)
                } else {
                    rng.gen_range(0..=t - long_frames)
                }
            } else {
                0
            };
            (idx, short_off, long_off)
        })
        .collect()
}

/// Train `student` in place under the given objective. The teacher, when
/// present, stays frozen. Returns per-epoch mean batch losses.
pub fn train(
    student: &mut Model,
    teacher: Option<&Model>,
    objective: &dyn Objective,
    split: &[Utterance],
    aam: &AamParams,
    settings: &TrainSettings,
    cfg: &DistillConfig,
) -> Result<TrainReport> {
    train_with_cache(student, teacher, objective, split, aam, settings, cfg, None)
}

/// [`train`] with an externally owned teacher-output cache. The frozen
/// teacher's ladder outputs on full-length segments do not depend on the
/// student, so several runs can share one cache — but only when they use
/// the same teacher, the same training split, and the same ladder step
/// count, since entries are keyed by (utterance index, step) alone.
#[allow(clippy::too_many_arguments)]
pub fn train_with_cache(
    student: &mut Model,
    teacher: Option<&Model>,
    objective: &dyn Objective,
    split: &[Utterance],
    aam: &AamParams,
    settings: &TrainSettings,
    cfg: &DistillConfig,
    shared_cache: Option<&TeacherCache>,
) -> Result<TrainReport> {
    settings.validate()?;
    cfg.validate()?;
    if split.is_empty() {
        return Err(Error::invalid("training split", "no utterances"));
    }
    if objective.requires_teacher() && teacher.is_none() {
        return Err(Error::invalid("teacher", format!("objective {:?} needs a teacher model", objective.name())));
    }
    if settings.short_frames < student.spec().min_frames() {
        return Err(Error::invalid(
            "short-frames",
            format!("{} is below the student's minimum of {}", settings.short_frames, student.spec().min_frames()),
        ));
    }
    let needs_long = objective.uses_long_segments();
    if needs_long && cfg.long_frames < settings.short_frames {
        return Err(Error::invalid(
            "long-frames",
            format!("{} is shorter than short-frames {}", cfg.long_frames, settings.short_frames),
        ));
    }
    for u in split {
        if u.frames() < settings.short_frames {
            return Err(Error::invalid(
                "training split",
                format!("utterance {} has {} frames, below short-frames {}", u.utterance_id, u.frames(), settings.short_frames),
            ));
        }
        if needs_long && u.frames() < cfg.long_frames {
            return Err(Error::invalid(
                "training split",
                format!("utterance {} has {} frames, below long-frames {}", u.utterance_id, u.frames(), cfg.long_frames),
            ));
        }
    }

    let local_cache;
    let cache = match shared_cache {
        Some(c) => c,
        None => {
            local_cache = TeacherCache::new();
            &local_cache
        }
    };
    let mut epoch_losses = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        let plan = epoch_plan(split, settings, cfg.long_frames, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in plan.chunks(settings.batch_size) {
            let mut items = Vec::with_capacity(chunk.len());
            for &(idx, short_off, long_off) in chunk {
                let u = &split[idx];
                let long = if needs_long {
                    Some(crop_features(&u.features, cfg.long_frames, long_off)?)
                } else {
                    None
                };
                items.push(BatchItem {
                    utterance_index: idx,
                    label: u.speaker_id,
                    short: crop_features(&u.features, settings.short_frames, short_off)?,
                    long,
                    long_is_full: cfg.long_frames == u.frames(),
                });
            }
            let ctx = BatchContext {
                student,
                teacher,
                aam,
                cfg,
                items: &items,
                cache: Some(cache),
            };
            let (value, grads) = objective.batch_loss(&ctx).map_err(|e| match e {
                Error::NonFinite { op } => {
                    Error::Diverged { epoch, detail: format!("non-finite value produced by {op}") }
                }
                other => other,
            })?;
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, detail: format!("batch loss {value}") });
            }
            let lr = settings.learning_rate;
            for ((_, p), g) in student.params_mut().zip(&grads) {
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= lr * gv;
                }
            }
            loss_sum += value;
            batches += 1;
        }
        epoch_losses.push(loss_sum / batches as f64);
    }
    Ok(TrainReport { epoch_losses })
}

/// Fraction of utterances whose no-margin class probabilities put the
/// most mass on their own speaker. Full-length inputs, no cropping.
pub fn classification_accuracy(model: &Model, aam: &AamParams, utterances: &[Utterance]) -> Result<f64> {
    if utterances.is_empty() {
        return Err(Error::invalid("evaluation split", "no utterances"));
    }
    let mut correct = 0usize;
    for u in utterances {
        let probs = forward_classify(model, &u.features, aam, None)?;
        let best = probs
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
            .map(|(i, _)| i)
            .expect("non-empty probability vector");
        if best == u.speaker_id {
            correct += 1;
        }
    }
    Ok(correct as f64 / utterances.len() as f64)
}
