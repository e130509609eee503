//! Line-oriented `key = value` experiment configuration.
//!
//! Every key has a default; a config file only lists overrides. Blank
//! lines and `#` comments are skipped. Unknown and duplicate keys are
//! rejected with the offending line number, so a typo can never silently
//! fall back to a default.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::models::{AamParams, ModelSpec};
use crate::objective::{method_names, objective_by_name, DistillConfig};
use crate::synth::CorpusSettings;
use crate::trainer::TrainSettings;

/// Full experiment configuration: corpus, models, training, distillation,
/// and evaluation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub corpus: CorpusSettings,

    pub teacher_widths: Vec<usize>,
    pub teacher_contexts: Vec<usize>,
    pub teacher_embed_dim: usize,
    pub student_widths: Vec<usize>,
    pub student_contexts: Vec<usize>,
    pub student_embed_dim: usize,

    pub aam_scale: f64,
    pub aam_margin: f64,

    pub teacher_epochs: usize,
    pub distill_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Training seeds; results are reported per seed and as the mean.
    pub seeds: Vec<u64>,

    pub method: String,
    /// Alignment weight; when absent the method's own default applies.
    pub eta: Option<f64>,
    pub ig_steps: usize,
    pub short_frames: usize,
    pub long_frames: usize,
    pub temperature: f64,

    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
    pub occlusion_steps: usize,
    /// Ladder steps for saliency analysis (not training).
    pub analysis_steps: usize,
    /// Held-out utterances used by the attribution and occlusion reports.
    pub analysis_utterances: usize,

    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            corpus: CorpusSettings {
                speakers: 32,
                train_per_speaker: 40,
                eval_per_speaker: 5,
                feature_dim: 16,
                frames: 600,
                noise_sigma: 0.3,
                target_trials: 200,
                nontarget_trials: 200,
                seed: 7,
            },
            teacher_widths: vec![64, 64, 64],
            teacher_contexts: vec![5, 3, 3],
            teacher_embed_dim: 16,
            student_widths: vec![16, 16, 16],
            student_contexts: vec![5, 3, 3],
            student_embed_dim: 16,
            aam_scale: 30.0,
            aam_margin: 0.2,
            teacher_epochs: 20,
            distill_epochs: 10,
            batch_size: 8,
            learning_rate: 0.002,
            seeds: vec![1, 2, 3],
            method: "iml".into(),
            eta: None,
            ig_steps: 8,
            short_frames: 200,
            long_frames: 600,
            temperature: 1.0,
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
            occlusion_steps: 20,
            analysis_steps: 64,
            analysis_utterances: 20,
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn bad(line: usize, detail: impl Into<String>) -> Error {
    Error::Config { line, detail: detail.into() }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(line, format!("key {key:?}: cannot parse {value:?}")))
}

fn parse_list<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|piece| {
            let piece = piece.trim();
            piece.parse().map_err(|_| bad(line, format!("key {key:?}: cannot parse list item {piece:?}")))
        })
        .collect()
}

impl ExperimentConfig {
    /// Parse overrides over the defaults and validate the result.
    pub fn from_text(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(bad(line, format!("expected `key = value`, got {trimmed:?}")));
            };
            let key = key.trim();
            let value = value.trim();
            if value.is_empty() {
                return Err(bad(line, format!("key {key:?} has no value")));
            }
            if seen.iter().any(|s| s == key) {
                return Err(bad(line, format!("duplicate key {key:?}")));
            }
            seen.push(key.to_string());
            cfg.apply(line, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        ExperimentConfig::from_text(&text)
    }

    fn apply(&mut self, line: usize, key: &str, value: &str) -> Result<()> {
        match key {
            "speakers" => self.corpus.speakers = parse_num(line, key, value)?,
            "train-per-speaker" => self.corpus.train_per_speaker = parse_num(line, key, value)?,
            "eval-per-speaker" => self.corpus.eval_per_speaker = parse_num(line, key, value)?,
            "feature-dim" => self.corpus.feature_dim = parse_num(line, key, value)?,
            "frames" => self.corpus.frames = parse_num(line, key, value)?,
            "noise-sigma" => self.corpus.noise_sigma = parse_num(line, key, value)?,
            "target-trials" => self.corpus.target_trials = parse_num(line, key, value)?,
            "nontarget-trials" => self.corpus.nontarget_trials = parse_num(line, key, value)?,
            "corpus-seed" => self.corpus.seed = parse_num(line, key, value)?,
            "teacher-widths" => self.teacher_widths = parse_list(line, key, value)?,
            "teacher-contexts" => self.teacher_contexts = parse_list(line, key, value)?,
            "teacher-embed-dim" => self.teacher_embed_dim = parse_num(line, key, value)?,
            "student-widths" => self.student_widths = parse_list(line, key, value)?,
            "student-contexts" => self.student_contexts = parse_list(line, key, value)?,
            "student-embed-dim" => self.student_embed_dim = parse_num(line, key, value)?,
            "aam-scale" => self.aam_scale = parse_num(line, key, value)?,
            "aam-margin" => self.aam_margin = parse_num(line, key, value)?,
            "teacher-epochs" => self.teacher_epochs = parse_num(line, key, value)?,
            "distill-epochs" => self.distill_epochs = parse_num(line, key, value)?,
            "batch-size" => self.batch_size = parse_num(line, key, value)?,
            "learning-rate" => self.learning_rate = parse_num(line, key, value)?,
            "seeds" => self.seeds = parse_list(line, key, value)?,
            "method" => self.method = value.to_string(),
            "eta" => self.eta = Some(parse_num(line, key, value)?),
            "ig-steps" => self.ig_steps = parse_num(line, key, value)?,
            "short-frames" => self.short_frames = parse_num(line, key, value)?,
            "long-frames" => self.long_frames = parse_num(line, key, value)?,
            "temperature" => self.temperature = parse_num(line, key, value)?,
            "p-target" => self.p_target = parse_num(line, key, value)?,
            "c-miss" => self.c_miss = parse_num(line, key, value)?,
            "c-fa" => self.c_fa = parse_num(line, key, value)?,
            "occlusion-steps" => self.occlusion_steps = parse_num(line, key, value)?,
            "analysis-steps" => self.analysis_steps = parse_num(line, key, value)?,
            "analysis-utterances" => self.analysis_utterances = parse_num(line, key, value)?,
            "out-dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(bad(line, format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.teacher_spec().validate()?;
        self.student_spec().validate()?;
        AamParams::new(self.aam_scale, self.aam_margin)?;
        if self.batch_size < 2 {
            return Err(Error::invalid("batch-size", "batch-level alignment needs at least 2"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning-rate", format!("{} must be finite and positive", self.learning_rate)));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("seeds", "need at least one training seed"));
        }
        if self.long_frames < self.short_frames {
            return Err(Error::invalid(
                "long-frames",
                format!("{} is shorter than short-frames {}", self.long_frames, self.short_frames),
            ));
        }
        if self.corpus.frames < self.long_frames {
            return Err(Error::invalid(
                "frames",
                format!("utterances have {} frames, below long-frames {}", self.corpus.frames, self.long_frames),
            ));
        }
        let needed = self.teacher_spec().min_frames().max(self.student_spec().min_frames());
        if self.short_frames < needed {
            return Err(Error::invalid(
                "short-frames",
                format!("{} is below the models' minimum of {needed}", self.short_frames),
            ));
        }
        if let Some(eta) = self.eta {
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(Error::invalid("eta", format!("{eta} must be finite and non-negative")));
            }
        }
        if method_names().iter().all(|&n| n != self.method) {
            return Err(Error::invalid(
                "method",
                format!("{:?} is not one of {}", self.method, method_names().join(", ")),
            ));
        }
        if self.ig_steps == 0 || self.analysis_steps == 0 {
            return Err(Error::invalid("ig-steps", "ladder step counts must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature", format!("{} must be finite and positive", self.temperature)));
        }
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::invalid("p-target", format!("{} must lie in (0, 1)", self.p_target)));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(Error::invalid("c-miss", "detection costs must be positive"));
        }
        if self.occlusion_steps == 0 {
            return Err(Error::invalid("occlusion-steps", "must be at least 1"));
        }
        if self.analysis_utterances == 0 {
            return Err(Error::invalid("analysis-utterances", "must be at least 1"));
        }
        Ok(())
    }

    // ── Derived pieces ───────────────────────────────────────────────────

    pub fn teacher_spec(&self) -> ModelSpec {
        ModelSpec {
            input_dim: self.corpus.feature_dim,
            frame_widths: self.teacher_widths.clone(),
            contexts: self.teacher_contexts.clone(),
            embed_dim: self.teacher_embed_dim,
            num_classes: self.corpus.speakers,
        }
    }

    pub fn student_spec(&self) -> ModelSpec {
        ModelSpec {
            input_dim: self.corpus.feature_dim,
            frame_widths: self.student_widths.clone(),
            contexts: self.student_contexts.clone(),
            embed_dim: self.student_embed_dim,
            num_classes: self.corpus.speakers,
        }
    }

    pub fn aam(&self) -> Result<AamParams> {
        AamParams::new(self.aam_scale, self.aam_margin)
    }

    /// The alignment weight actually in force for the configured method.
    pub fn effective_eta(&self) -> Result<f64> {
        match self.eta {
            Some(eta) => Ok(eta),
            None => Ok(objective_by_name(&self.method)?.default_eta()),
        }
    }

    pub fn distill_config(&self) -> Result<DistillConfig> {
        self.distill_config_for(&self.method)
    }

    /// Distillation settings for an explicit method, resolving the
    /// alignment weight to the override if one is set, else the method's
    /// own default.
    pub fn distill_config_for(&self, method: &str) -> Result<DistillConfig> {
        let eta = match self.eta {
            Some(eta) => eta,
            None => objective_by_name(method)?.default_eta(),
        };
        Ok(DistillConfig {
            method: method.to_string(),
            eta,
            ig_steps: self.ig_steps,
            long_frames: self.long_frames,
            temperature: self.temperature,
        })
    }

    pub fn train_settings(&self, epochs: usize, seed: u64) -> TrainSettings {
        TrainSettings {
            epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            short_frames: self.short_frames,
            seed,
        }
    }

    /// Render as config text that parses back to an equal value. Written
    /// into run manifests so any run can be reproduced from its snapshot.
    pub fn to_text(&self) -> String {
        fn list(values: &[usize]) -> String {
            values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        }
        let mut s = String::new();
        let _ = writeln!(s, "speakers = {}", self.corpus.speakers);
        let _ = writeln!(s, "train-per-speaker = {}", self.corpus.train_per_speaker);
        let _ = writeln!(s, "eval-per-speaker = {}", self.corpus.eval_per_speaker);
        let _ = writeln!(s, "feature-dim = {}", self.corpus.feature_dim);
        let _ = writeln!(s, "frames = {}", self.corpus.frames);
        let _ = writeln!(s, "noise-sigma = {}", self.corpus.noise_sigma);
        let _ = writeln!(s, "target-trials = {}", self.corpus.target_trials);
        let _ = writeln!(s, "nontarget-trials = {}", self.corpus.nontarget_trials);
        let _ = writeln!(s, "corpus-seed = {}", self.corpus.seed);
        let _ = writeln!(s, "teacher-widths = {}", list(&self.teacher_widths));
        let _ = writeln!(s, "teacher-contexts = {}", list(&self.teacher_contexts));
        let _ = writeln!(s, "teacher-embed-dim = {}", self.teacher_embed_dim);
        let _ = writeln!(s, "student-widths = {}", list(&self.student_widths));
        let _ = writeln!(s, "student-contexts = {}", list(&self.student_contexts));
        let _ = writeln!(s, "student-embed-dim = {}", self.student_embed_dim);
        let _ = writeln!(s, "aam-scale = {}", self.aam_scale);
        let _ = writeln!(s, "aam-margin = {}", self.aam_margin);
        let _ = writeln!(s, "teacher-epochs = {}", self.teacher_epochs);
        let _ = writeln!(s, "distill-epochs = {}", self.distill_epochs);
        let _ = writeln!(s, "batch-size = {}", self.batch_size);
        let _ = writeln!(s, "learning-rate = {}", self.learning_rate);
        let _ = writeln!(s, "seeds = {}", self.seeds.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        let _ = writeln!(s, "method = {}", self.method);
        if let Some(eta) = self.eta {
            let _ = writeln!(s, "eta = {eta}");
        }
        let _ = writeln!(s, "ig-steps = {}", self.ig_steps);
        let _ = writeln!(s, "short-frames = {}", self.short_frames);
        let _ = writeln!(s, "long-frames = {}", self.long_frames);
        let _ = writeln!(s, "temperature = {}", self.temperature);
        let _ = writeln!(s, "p-target = {}", self.p_target);
        let _ = writeln!(s, "c-miss = {}", self.c_miss);
        let _ = writeln!(s, "c-fa = {}", self.c_fa);
        let _ = writeln!(s, "occlusion-steps = {}", self.occlusion_steps);
        let _ = writeln!(s, "analysis-steps = {}", self.analysis_steps);
        let _ = writeln!(s, "analysis-utterances = {}", self.analysis_utterances);
        let _ = writeln!(s, "out-dir = {}", self.out_dir.display());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let parsed = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(cfg.effective_eta().unwrap(), 9.0, "ladder method default weight");
    }

    #[test]
    fn overrides_comments_and_blank_lines() {
        let text = "\n# comment\n  speakers = 4\nmethod = vanilla-kd\n\neta = 2.5\nseeds = 5, 6\nfeature-dim=8\n";
        let mut cfg = ExperimentConfig::from_text(text).unwrap();
        assert_eq!(cfg.corpus.speakers, 4);
        assert_eq!(cfg.method, "vanilla-kd");
        assert_eq!(cfg.eta, Some(2.5));
        assert_eq!(cfg.effective_eta().unwrap(), 2.5);
        assert_eq!(cfg.seeds, vec![5, 6]);
        assert_eq!(cfg.corpus.feature_dim, 8);
        // Without an explicit eta the method default applies.
        cfg.eta = None;
        assert_eq!(cfg.effective_eta().unwrap(), 9.0);
        cfg.method = "emb-cos".into();
        assert_eq!(cfg.effective_eta().unwrap(), 20.0);
    }

    #[test]
    fn rejects_malformed_input_with_line_numbers() {
        for (text, needle) in [
            ("speakers = 4\nwat = 9\n", "unknown key"),
            ("speakers = 4\nspeakers = 5\n", "duplicate"),
            ("speakers\n", "expected `key = value`"),
            ("speakers = \n", "no value"),
            ("speakers = four\n", "cannot parse"),
            ("teacher-widths = 64,x\n", "list item"),
        ] {
            let err = ExperimentConfig::from_text(text).unwrap_err();
            let msg = err.to_string();
            assert!(msg.contains(needle), "{text:?}: {msg}");
            match err {
                Error::Config { line, .. } => assert!(line >= 1),
                other => panic!("expected config error, got {other}"),
            }
        }
    }

    #[test]
    fn validation_rejects_inconsistent_settings() {
        for text in [
            "batch-size = 1\n",
            "seeds = \n",
            "long-frames = 100\nshort-frames = 200\n",
            "frames = 400\n",             // below default long-frames
            "short-frames = 3\n",         // below model context minimum
            "method = mystery\n",
            "eta = -1\n",
            "temperature = 0\n",
            "p-target = 1.5\n",
            "occlusion-steps = 0\n",
        ] {
            assert!(ExperimentConfig::from_text(text).is_err(), "{text:?} should fail");
        }
    }
}
