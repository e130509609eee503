//! Deterministic synthetic speaker corpus.
//!
//! Each synthetic "speaker" is a generative template: a mean spectrum, a
//! per-frequency modulation amplitude, and a modulation rate. An utterance
//! of T frames (100 frames stand in for one second) samples
//!
//! `frame[t] = mean + amplitude * sin(2*pi*rate*t + phase) + noise`
//!
//! with a per-utterance random phase and i.i.d. Gaussian noise. Speaker
//! identity is therefore spread along the time axis — the modulation rates
//! (0.002..0.02 per frame, i.e. periods of 50..500 frames) are slow enough
//! that longer segments reveal more of a speaker's signature than short
//! ones.
//!
//! Everything is bit-reproducible: templates, utterances, and trial lists
//! are pure functions of their seeds, and every utterance derives its own
//! generator so corpus assembly order cannot matter.
//!
//! On disk a corpus is a directory holding `corpus.json` (the generation
//! settings), `train.csv` / `eval.csv` manifests with header
//! `utterance-id,speaker-id,frames,seed`, a `trials.csv` verification pair
//! list with header `a,b,target`, and one tensor dump per utterance under
//! `features/`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng};
use crate::tensor::{read_dump, write_dump, Tensor};

/// Smallest allowed L2 distance between two speaker templates, measured on
/// the concatenation of mean and amplitude vectors.
pub const MIN_TEMPLATE_DISTANCE: f64 = 0.5;

const REJECTION_ATTEMPTS: usize = 10_000;

/// One speaker's generative template.
///
/// The sampling ranges encode the difficulty of the task. Pooled over a
/// window, an utterance collapses to `mean + s * amplitude` where `s` is
/// the window average of the utterance's sinusoid — a random per-crop
/// scalar. Large amplitudes relative to the mean spread make the
/// speakers' lines overlap positionally, so a model must identify the
/// amplitude *direction* rather than a fixed point; slow rates keep the
/// scalar `s` far from its zero mean even on long windows, so short crops
/// are genuinely misleading and longer windows genuinely help. Wide mean
/// ranges or fast rates would make every speaker trivially separable from
/// pooled statistics and no model ordering would survive.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerTemplate {
    /// Mean spectrum, F values in [-0.16, 0.16].
    pub mean: Vec<f64>,
    /// Modulation amplitude per frequency, F values in [1.2, 2.0].
    pub amplitude: Vec<f64>,
    /// Modulation rate in cycles per frame, in [0.0005, 0.0025]
    /// (periods of roughly 400 to 2000 frames).
    pub rate: f64,
}

/// A set of mutually separated speaker templates.
#[derive(Debug, Clone)]
pub struct SpeakerBank {
    feature_dim: usize,
    seed: u64,
    templates: Vec<SpeakerTemplate>,
}

impl SpeakerBank {
    pub fn num_speakers(&self) -> usize {
        self.templates.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn template(&self, speaker: usize) -> Option<&SpeakerTemplate> {
        self.templates.get(speaker)
    }

    /// Assemble a bank from explicit templates (used by tests that need
    /// hand-crafted rates or amplitudes).
    pub fn from_templates(feature_dim: usize, seed: u64, templates: Vec<SpeakerTemplate>) -> Result<SpeakerBank> {
        if templates.len() < 2 {
            return Err(Error::invalid("speaker bank", "at least 2 speakers required"));
        }
        for (i, t) in templates.iter().enumerate() {
            if t.mean.len() != feature_dim || t.amplitude.len() != feature_dim {
                return Err(Error::invalid("speaker bank", format!("template {i} does not match feature dim {feature_dim}")));
            }
        }
        Ok(SpeakerBank { feature_dim, seed, templates })
    }
}

fn template_distance(a: &SpeakerTemplate, b: &SpeakerTemplate) -> f64 {
    let d: f64 = a
        .mean
        .iter()
        .chain(&a.amplitude)
        .zip(b.mean.iter().chain(&b.amplitude))
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    d.sqrt()
}

/// Draw `n` speaker templates with `f` frequency bins, rejecting any draw
/// closer than [`MIN_TEMPLATE_DISTANCE`] to an already-accepted template.
pub fn generate_speakers(n: usize, f: usize, seed: u64) -> Result<SpeakerBank> {
    if n < 2 {
        return Err(Error::invalid("speaker bank", format!("need at least 2 speakers, got {n}")));
    }
    if f == 0 {
        return Err(Error::invalid("speaker bank", "feature dim must be positive"));
    }
    let mut rng = seeded_rng(seed);
    let mut templates: Vec<SpeakerTemplate> = Vec::with_capacity(n);
    for i in 0..n {
        let mut accepted = None;
        for _ in 0..REJECTION_ATTEMPTS {
            let mean: Vec<f64> = (0..f).map(|_| rng.gen_range(-0.16..0.16)).collect();
            let amplitude: Vec<f64> = (0..f).map(|_| rng.gen_range(1.2..2.0)).collect();
            let rate = rng.gen_range(0.0005..0.0025);
            let candidate = SpeakerTemplate { mean, amplitude, rate };
            if templates.iter().all(|t| template_distance(t, &candidate) >= MIN_TEMPLATE_DISTANCE) {
                accepted = Some(candidate);
                break;
            }
        }
        match accepted {
            Some(t) => templates.push(t),
            None => {
                return Err(Error::invalid(
                    "speaker bank",
                    format!("could not separate speaker {i} after {REJECTION_ATTEMPTS} draws"),
                ))
            }
        }
    }
    Ok(SpeakerBank { feature_dim: f, seed, templates })
}

/// One utterance: a feature matrix tied to a speaker.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub utterance_id: String,
    pub speaker_id: usize,
    /// `[T, F]` features.
    pub features: Tensor,
    /// Seed this utterance was generated from (recorded in manifests).
    pub seed: u64,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }
}

/// Synthesise one utterance of `frames` frames for a speaker. The phase
/// and the Gaussian noise (scaled by `noise_sigma`) come from a generator
/// seeded with `seed` alone, so the call is deterministic in its arguments.
pub fn synth_utterance(bank: &SpeakerBank, speaker: usize, frames: usize, noise_sigma: f64, seed: u64) -> Result<Utterance> {
    let template = bank
        .template(speaker)
        .ok_or_else(|| Error::invalid("utterance", format!("speaker {speaker} out of 0..{}", bank.num_speakers())))?;
    if frames == 0 {
        return Err(Error::invalid("utterance", "frame count must be positive"));
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::invalid("utterance", format!("noise sigma {noise_sigma} must be non-negative")));
    }
    let f = bank.feature_dim();
    let mut rng = seeded_rng(seed);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut data = Vec::with_capacity(frames * f);
    for t in 0..frames {
        let osc = (std::f64::consts::TAU * template.rate * t as f64 + phase).sin();
        for d in 0..f {
            let noise: f64 = rng.sample(StandardNormal);
            data.push(template.mean[d] + template.amplitude[d] * osc + noise_sigma * noise);
        }
    }
    Ok(Utterance {
        utterance_id: format!("s{speaker:03}-{seed:016x}"),
        speaker_id: speaker,
        features: Tensor::new(vec![frames, f], data)?,
        seed,
    })
}

/// Contiguous time slice of an utterance's features, bit-identical to the
/// source region.
pub fn crop_segment(u: &Utterance, frames: usize, offset: usize) -> Result<Tensor> {
    crop_features(&u.features, frames, offset)
}

/// [`crop_segment`] on a bare feature matrix.
pub fn crop_features(features: &Tensor, frames: usize, offset: usize) -> Result<Tensor> {
    if features.rank() != 2 {
        return Err(Error::shape("crop", format!("expected rank 2, got {:?}", features.shape())));
    }
    let t = features.shape()[0];
    let f = features.shape()[1];
    if frames == 0 || offset + frames > t {
        return Err(Error::invalid("crop", format!("slice [{offset}, {offset}+{frames}) out of {t} frames")));
    }
    let data = features.data()[offset * f..(offset + frames) * f].to_vec();
    Tensor::new(vec![frames, f], data)
}

/// One verification trial: a pair of utterance ids and whether they share
/// a speaker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub a: String,
    pub b: String,
    pub target: bool,
}

/// Draw a deterministic trial list: exactly `n_target` same-speaker pairs
/// and `n_nontarget` cross-speaker pairs, without repetition, by shuffling
/// the exhaustive pair lists with a seeded generator.
pub fn make_trials(utterances: &[Utterance], n_target: usize, n_nontarget: usize, seed: u64) -> Result<Vec<Trial>> {
    let mut by_speaker: BTreeMap<usize, Vec<&Utterance>> = BTreeMap::new();
    for u in utterances {
        by_speaker.entry(u.speaker_id).or_default().push(u);
    }
    if by_speaker.len() < 2 {
        return Err(Error::invalid("trial list", "need at least 2 speakers"));
    }
    let mut same = Vec::new();
    let mut cross = Vec::new();
    for (i, a) in utterances.iter().enumerate() {
        for b in &utterances[i + 1..] {
            if a.speaker_id == b.speaker_id {
                same.push((a, b));
            } else {
                cross.push((a, b));
            }
        }
    }
    if same.len() < n_target {
        return Err(Error::invalid(
            "trial list",
            format!("{n_target} target pairs requested, only {} available", same.len()),
        ));
    }
    if cross.len() < n_nontarget {
        return Err(Error::invalid(
            "trial list",
            format!("{n_nontarget} non-target pairs requested, only {} available", cross.len()),
        ));
    }
    let mut rng = seeded_rng(seed);
    same.shuffle(&mut rng);
    cross.shuffle(&mut rng);
    let mut trials = Vec::with_capacity(n_target + n_nontarget);
    for (a, b) in same.into_iter().take(n_target) {
        trials.push(Trial { a: a.utterance_id.clone(), b: b.utterance_id.clone(), target: true });
    }
    for (a, b) in cross.into_iter().take(n_nontarget) {
        trials.push(Trial { a: a.utterance_id.clone(), b: b.utterance_id.clone(), target: false });
    }
    Ok(trials)
}

// ── Whole-corpus assembly ────────────────────────────────────────────────

/// Everything needed to regenerate a corpus from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSettings {
    pub speakers: usize,
    pub train_per_speaker: usize,
    pub eval_per_speaker: usize,
    pub feature_dim: usize,
    /// Frames per utterance (train and eval alike).
    pub frames: usize,
    pub noise_sigma: f64,
    pub target_trials: usize,
    pub nontarget_trials: usize,
    pub seed: u64,
}

impl CorpusSettings {
    pub fn validate(&self) -> Result<()> {
        if self.speakers < 2 {
            return Err(Error::invalid("corpus settings", "at least 2 speakers required"));
        }
        if self.train_per_speaker == 0 || self.eval_per_speaker == 0 {
            return Err(Error::invalid("corpus settings", "utterance counts must be positive"));
        }
        if self.feature_dim == 0 || self.frames == 0 {
            return Err(Error::invalid("corpus settings", "feature dim and frames must be positive"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::invalid("corpus settings", "noise sigma must be non-negative"));
        }
        Ok(())
    }
}

/// A fully materialised corpus: bank, train/eval utterances, trial list.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub settings: CorpusSettings,
    pub bank: SpeakerBank,
    pub train: Vec<Utterance>,
    pub eval: Vec<Utterance>,
    pub trials: Vec<Trial>,
}

impl Corpus {
    pub fn find(&self, utterance_id: &str) -> Option<&Utterance> {
        self.train
            .iter()
            .chain(&self.eval)
            .find(|u| u.utterance_id == utterance_id)
    }
}

/// Generate a corpus in memory. Utterance seeds derive from
/// `(settings.seed, split, speaker, index)`, so any single utterance can
/// be regenerated in isolation.
pub fn build_corpus(settings: &CorpusSettings) -> Result<Corpus> {
    settings.validate()?;
    let bank = generate_speakers(settings.speakers, settings.feature_dim, derive_seed(settings.seed, "bank", &[]))?;
    let mut train = Vec::with_capacity(settings.speakers * settings.train_per_speaker);
    let mut eval = Vec::with_capacity(settings.speakers * settings.eval_per_speaker);
    for (split_idx, (count, bucket)) in
        [(settings.train_per_speaker, &mut train), (settings.eval_per_speaker, &mut eval)].into_iter().enumerate()
    {
        for speaker in 0..settings.speakers {
            for index in 0..count {
                let seed = derive_seed(settings.seed, "utterance", &[split_idx as u64, speaker as u64, index as u64]);
                bucket.push(synth_utterance(&bank, speaker, settings.frames, settings.noise_sigma, seed)?);
            }
        }
    }
    let trials = make_trials(&eval, settings.target_trials, settings.nontarget_trials, derive_seed(settings.seed, "trials", &[]))?;
    Ok(Corpus { settings: settings.clone(), bank, train, eval, trials })
}

// ── Disk layout ──────────────────────────────────────────────────────────

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path.display().to_string(), e)
}

fn write_manifest(path: &Path, utterances: &[Utterance]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        writeln!(w, "utterance-id,speaker-id,frames,seed")?;
        for u in utterances {
            writeln!(w, "{},{},{},{}", u.utterance_id, u.speaker_id, u.frames(), u.seed)?;
        }
        w.flush()
    })()
    .map_err(|e| io_err(path, e))
}

fn read_manifest(path: &Path) -> Result<Vec<(String, usize, usize, u64)>> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| io_err(path, e))?
        .ok_or_else(|| Error::format("manifest", "empty file"))?;
    if header != "utterance-id,speaker-id,frames,seed" {
        return Err(Error::format("manifest", format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::format("manifest", format!("line {}: expected 4 fields", ln + 2)));
        }
        let speaker = parts[1].parse().map_err(|_| Error::format("manifest", format!("bad speaker id {:?}", parts[1])))?;
        let frames = parts[2].parse().map_err(|_| Error::format("manifest", format!("bad frame count {:?}", parts[2])))?;
        let seed = parts[3].parse().map_err(|_| Error::format("manifest", format!("bad seed {:?}", parts[3])))?;
        rows.push((parts[0].to_string(), speaker, frames, seed));
    }
    Ok(rows)
}

/// Write a corpus directory: settings, manifests, trial list, and one
/// feature dump per utterance.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    let features_dir = dir.join("features");
    fs::create_dir_all(&features_dir).map_err(|e| io_err(&features_dir, e))?;

    let settings_path = dir.join("corpus.json");
    let json = serde_json::to_string_pretty(&corpus.settings)
        .map_err(|e| Error::format("corpus settings", e.to_string()))?;
    fs::write(&settings_path, json + "\n").map_err(|e| io_err(&settings_path, e))?;

    write_manifest(&dir.join("train.csv"), &corpus.train)?;
    write_manifest(&dir.join("eval.csv"), &corpus.eval)?;

    let trials_path = dir.join("trials.csv");
    let file = fs::File::create(&trials_path).map_err(|e| io_err(&trials_path, e))?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        writeln!(w, "a,b,target")?;
        for t in &corpus.trials {
            writeln!(w, "{},{},{}", t.a, t.b, u8::from(t.target))?;
        }
        w.flush()
    })()
    .map_err(|e| io_err(&trials_path, e))?;

    for u in corpus.train.iter().chain(&corpus.eval) {
        let path = features_dir.join(format!("{}.txt", u.utterance_id));
        let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        let mut w = BufWriter::new(file);
        write_dump(&mut w, &u.utterance_id, &u.features).map_err(|e| io_err(&path, e))?;
        w.flush().map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

/// Load a corpus directory written by [`write_corpus`]. Features come from
/// the stored dumps; the speaker bank is regenerated from the settings.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let settings_path = dir.join("corpus.json");
    let json = fs::read_to_string(&settings_path).map_err(|e| io_err(&settings_path, e))?;
    let settings: CorpusSettings =
        serde_json::from_str(&json).map_err(|e| Error::format("corpus settings", e.to_string()))?;
    settings.validate()?;
    let bank = generate_speakers(settings.speakers, settings.feature_dim, derive_seed(settings.seed, "bank", &[]))?;

    let load_split = |manifest: &str| -> Result<Vec<Utterance>> {
        let rows = read_manifest(&dir.join(manifest))?;
        let mut utterances = Vec::with_capacity(rows.len());
        for (id, speaker, frames, seed) in rows {
            let path = dir.join("features").join(format!("{id}.txt"));
            let file = fs::File::open(&path).map_err(|e| io_err(&path, e))?;
            let (name, features) = read_dump(&mut BufReader::new(file))?;
            if name != id {
                return Err(Error::format("feature dump", format!("{path:?} holds {name:?}, expected {id:?}")));
            }
            if features.shape() != [frames, settings.feature_dim] {
                return Err(Error::format(
                    "feature dump",
                    format!("{id}: shape {:?} does not match manifest", features.shape()),
                ));
            }
            utterances.push(Utterance { utterance_id: id, speaker_id: speaker, features, seed });
        }
        Ok(utterances)
    };
    let train = load_split("train.csv")?;
    let eval = load_split("eval.csv")?;

    let trials_path = dir.join("trials.csv");
    let file = fs::File::open(&trials_path).map_err(|e| io_err(&trials_path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| io_err(&trials_path, e))?
        .ok_or_else(|| Error::format("trial list", "empty file"))?;
    if header != "a,b,target" {
        return Err(Error::format("trial list", format!("unexpected header {header:?}")));
    }
    let mut trials = Vec::new();
    for line in lines {
        let line = line.map_err(|e| io_err(&trials_path, e))?;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::format("trial list", format!("expected 3 fields, got {line:?}")));
        }
        let target = match parts[2] {
            "1" => true,
            "0" => false,
            other => return Err(Error::format("trial list", format!("bad target flag {other:?}"))),
        };
        trials.push(Trial { a: parts[0].to_string(), b: parts[1].to_string(), target });
    }
    Ok(Corpus { settings, bank, train, eval, trials })
}
