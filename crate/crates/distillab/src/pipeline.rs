//! Experiment orchestration: each CLI subcommand maps to a `run_*`
//! function here that reads artifacts from earlier stages, does its work,
//! writes its outputs, and returns a manifest describing them.
//!
//! ## Output layout
//!
//! Everything lives under the configured output directory:
//!
//! ```text
//! out/
//!   corpus/        corpus.json, train.csv, eval.csv, trials.csv, features/
//!   teacher/       checkpoint.txt, metrics.csv, manifest.json
//!   distill/<m>/   checkpoint-seed<s>.txt, metrics.csv, manifest.json
//!   attribution/   saliency-*.csv/.meta, curve-*.csv, curve-mse.csv
//!   occlusion/     curves-<tag>.csv, auc.csv, manifest.json
//!   ablation/      durations.csv, manifest.json
//!   report/        summary.csv, manifest.json
//! ```
//!
//! Every table is CSV. Metric tables use `metric,value,seed` rows where
//! the seed column holds a training seed or the literal `mean`. Wall-clock
//! time appears only in manifests, never in CSVs, so reruns with the same
//! config and seeds produce byte-identical tables.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attribution::{
    baseline_for, integrated_gradients, time_weight_curve, write_curve_csv, write_saliency_csv,
    write_saliency_meta, AttributionOutput, BaselineKind, Saliency,
};
use crate::attribution::{curve_mse, gradient_saliency};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{
    compute_eer, compute_min_dcf, cosine_score, curve_auc, occlusion_sweep, OcclusionCurve,
    OcclusionMode, ScoreSet,
};
use crate::models::{build_model, forward_embed, load_checkpoint, save_checkpoint, AamParams, Model};
use crate::objective::{objective_by_name, TeacherCache};
use crate::rng::derive_seed;
use crate::synth::{build_corpus, load_corpus, write_corpus, Corpus, Utterance};
use crate::trainer::{classification_accuracy, train, train_with_cache, TrainReport};

// ── Manifests and metric rows ────────────────────────────────────────────

/// One row of a metrics table.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    /// Training seed, or `mean` for the across-seed aggregate.
    pub seed: String,
}

impl MetricRow {
    fn new(metric: &str, value: f64, seed: impl Into<String>) -> MetricRow {
        MetricRow { metric: metric.into(), value, seed: seed.into() }
    }
}

/// Record of one pipeline command: the exact config it ran with, the files
/// it produced (relative to the output directory), its metric rows, and
/// how long it took.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: String,
    pub files: Vec<String>,
    pub metrics: Vec<MetricRow>,
    pub wall_clock_seconds: f64,
}

struct ManifestBuilder {
    command: String,
    config: String,
    files: Vec<String>,
    metrics: Vec<MetricRow>,
    started: Instant,
    out_dir: PathBuf,
}

impl ManifestBuilder {
    fn new(command: &str, cfg: &ExperimentConfig) -> ManifestBuilder {
        ManifestBuilder {
            command: command.into(),
            config: cfg.to_text(),
            files: Vec::new(),
            metrics: Vec::new(),
            started: Instant::now(),
            out_dir: cfg.out_dir.clone(),
        }
    }

    /// Write `content` under the output directory and record the file.
    fn write(&mut self, relative: &str, content: &str) -> Result<()> {
        let path = self.out_dir.join(relative);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
        fs::write(&path, content).map_err(|e| Error::io(path.display().to_string(), e))?;
        self.files.push(relative.to_string());
        Ok(())
    }

    fn record(&mut self, relative: &str) {
        self.files.push(relative.to_string());
    }

    /// Serialise the manifest next to the command's outputs.
    fn finish(mut self, dir: &str) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: self.command.clone(),
            config: self.config.clone(),
            files: {
                self.files.sort();
                self.files.clone()
            },
            metrics: self.metrics.clone(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::format("run manifest", e.to_string()))?;
        let path = self.out_dir.join(dir).join("manifest.json");
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
        fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(manifest)
    }
}

fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("metric,value,seed\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.metric, r.value, r.seed));
    }
    s
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

// ── In-memory core (also used by the acceptance suite) ──────────────────

/// Verification quality of one model on the corpus trial list.
#[derive(Debug, Clone, Copy)]
pub struct VerificationMetrics {
    pub eer: f64,
    pub threshold: f64,
    pub min_dcf: f64,
    /// Closed-set classification accuracy on the evaluation split.
    pub accuracy: f64,
}

/// Score every trial by cosine similarity of full-length evaluation
/// embeddings, then sweep for EER and minimum detection cost.
pub fn evaluate_verification(
    model: &Model,
    aam: &AamParams,
    corpus: &Corpus,
    cfg: &ExperimentConfig,
) -> Result<VerificationMetrics> {
    let mut embeddings: BTreeMap<&str, crate::tensor::Tensor> = BTreeMap::new();
    for u in &corpus.eval {
        embeddings.insert(u.utterance_id.as_str(), forward_embed(model, &u.features)?);
    }
    let mut scores = Vec::with_capacity(corpus.trials.len());
    let mut labels = Vec::with_capacity(corpus.trials.len());
    for t in &corpus.trials {
        let a = embeddings
            .get(t.a.as_str())
            .ok_or_else(|| Error::invalid("trial list", format!("unknown utterance {:?}", t.a)))?;
        let b = embeddings
            .get(t.b.as_str())
            .ok_or_else(|| Error::invalid("trial list", format!("unknown utterance {:?}", t.b)))?;
        scores.push(cosine_score(a, b)?);
        labels.push(t.target);
    }
    let set = ScoreSet::new(scores, labels)?;
    let (eer, threshold) = compute_eer(&set)?;
    let min_dcf = compute_min_dcf(&set, cfg.p_target, cfg.c_miss, cfg.c_fa)?;
    let accuracy = classification_accuracy(model, aam, &corpus.eval)?;
    Ok(VerificationMetrics { eer, threshold, min_dcf, accuracy })
}

/// Train the teacher spec from scratch with plain classifier training.
/// Uses the first configured seed.
pub fn train_teacher_model(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<(Model, TrainReport)> {
    let seed0 = cfg.seeds[0];
    let mut model = build_model(&cfg.teacher_spec(), derive_seed(seed0, "teacher-init", &[]))?;
    let objective = objective_by_name("baseline")?;
    let aam = cfg.aam()?;
    let settings = cfg.train_settings(cfg.teacher_epochs, derive_seed(seed0, "teacher-train", &[]));
    let mut dc = cfg.distill_config_for("baseline")?;
    dc.long_frames = cfg.long_frames;
    let report = train(&mut model, None, objective.as_ref(), &corpus.train, &aam, &settings, &dc)?;
    Ok((model, report))
}

/// Train a student under the named objective with the given seed. Model
/// initialisation and batch order depend on the seed but not the method,
/// so methods sharing a seed see identical starting points and batches.
pub fn train_student_model(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    teacher: Option<&Model>,
    method: &str,
    seed: u64,
) -> Result<(Model, TrainReport)> {
    train_student_model_cached(cfg, corpus, teacher, method, seed, None)
}

/// [`train_student_model`] sharing a teacher-output cache across calls.
/// Valid only while the teacher, training split, and ladder step count
/// stay fixed (see [`train_with_cache`]).
pub fn train_student_model_cached(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    teacher: Option<&Model>,
    method: &str,
    seed: u64,
    cache: Option<&TeacherCache>,
) -> Result<(Model, TrainReport)> {
    let mut model = build_model(&cfg.student_spec(), derive_seed(seed, "student-init", &[]))?;
    let objective = objective_by_name(method)?;
    let aam = cfg.aam()?;
    let settings = cfg.train_settings(cfg.distill_epochs, derive_seed(seed, "student-train", &[]));
    let dc = cfg.distill_config_for(method)?;
    let report =
        train_with_cache(&mut model, teacher, objective.as_ref(), &corpus.train, &aam, &settings, &dc, cache)?;
    Ok((model, report))
}

/// The held-out utterances used by attribution and occlusion reports:
/// the first `analysis_utterances` of the evaluation split.
pub fn analysis_split<'a>(cfg: &ExperimentConfig, corpus: &'a Corpus) -> &'a [Utterance] {
    let n = cfg.analysis_utterances.min(corpus.eval.len());
    &corpus.eval[..n]
}

/// Integrated-gradients saliency for an utterance with respect to its own
/// speaker, and the normalised time-weight curve derived from it.
pub fn ig_time_curve(
    model: &Model,
    aam: &AamParams,
    u: &Utterance,
    steps: usize,
) -> Result<(Saliency, Vec<f64>)> {
    let baseline = baseline_for(&u.features, BaselineKind::TimeMean)?;
    let saliency = integrated_gradients(
        model,
        aam,
        &u.features,
        &baseline,
        steps,
        u.speaker_id,
        AttributionOutput::Logit,
    )?;
    let curve = time_weight_curve(&saliency);
    Ok((saliency, curve))
}

/// Normalised time-weight curves for each utterance under one model.
pub fn time_curves(model: &Model, aam: &AamParams, utts: &[Utterance], steps: usize) -> Result<Vec<Vec<f64>>> {
    utts.iter().map(|u| ig_time_curve(model, aam, u, steps).map(|(_, c)| c)).collect()
}

/// Mean squared distance between two models' time-weight curves, averaged
/// over utterances. Inputs are parallel outputs of [`time_curves`].
pub fn mean_curve_mse(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("curve-mse", format!("{} vs {} curve sets", a.len(), b.len())));
    }
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b) {
        sum += curve_mse(x, y)?;
    }
    Ok(sum / a.len() as f64)
}

/// Mean insertion and deletion curves (and their areas) for one model over
/// an evaluation subset. Per-utterance frame ranking comes from
/// integrated-gradients saliency at `ig_steps`. With `accuracy` set, curve
/// values are top-1 hit rates instead of target-class probabilities.
pub fn mean_occlusion_curves(
    model: &Model,
    aam: &AamParams,
    utts: &[Utterance],
    ig_steps: usize,
    occlusion_steps: usize,
    accuracy: bool,
) -> Result<(OcclusionCurve, OcclusionCurve)> {
    if utts.is_empty() {
        return Err(Error::invalid("occlusion", "no utterances to analyse"));
    }
    let mut sums: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    let mut fractions = Vec::new();
    for u in utts {
        let (saliency, _) = ig_time_curve(model, aam, u, ig_steps)?;
        for mode in [OcclusionMode::Insertion, OcclusionMode::Deletion] {
            let (fr, probs) = occlusion_sweep(model, aam, &u.features, &saliency, occlusion_steps, mode)?;
            let values: Vec<f64> = probs
                .iter()
                .map(|p| {
                    if accuracy {
                        let best = p
                            .data()
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
                            .map(|(i, _)| i)
                            .expect("non-empty probabilities");
                        if best == u.speaker_id {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        p.data()[u.speaker_id]
                    }
                })
                .collect();
            let acc = sums.entry(mode.name()).or_insert_with(|| vec![0.0; values.len()]);
            for (a, v) in acc.iter_mut().zip(&values) {
                *a += v;
            }
            fractions = fr;
        }
    }
    let n = utts.len() as f64;
    let finish = |mode: OcclusionMode, sums: &BTreeMap<&str, Vec<f64>>| -> Result<OcclusionCurve> {
        let values = sums[mode.name()].iter().map(|v| v / n).collect();
        OcclusionCurve::new(fractions.clone(), values, mode)
    };
    Ok((finish(OcclusionMode::Insertion, &sums)?, finish(OcclusionMode::Deletion, &sums)?))
}

// ── Disk plumbing ────────────────────────────────────────────────────────

fn corpus_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("corpus")
}

fn teacher_checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("teacher").join("checkpoint.txt")
}

fn student_checkpoint_rel(method: &str, seed: u64) -> String {
    format!("distill/{method}/checkpoint-seed{seed}.txt")
}

fn load_pipeline_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let dir = corpus_dir(cfg);
    if !dir.join("corpus.json").exists() {
        return Err(Error::invalid(
            "corpus",
            format!("no corpus at {:?}; run the gen-data command first", dir),
        ));
    }
    load_corpus(&dir)
}

fn load_teacher(cfg: &ExperimentConfig) -> Result<Model> {
    let path = teacher_checkpoint_path(cfg);
    if !path.exists() {
        return Err(Error::invalid(
            "teacher checkpoint",
            format!("nothing at {path:?}; run the train-teacher command first"),
        ));
    }
    let file = fs::File::open(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    load_checkpoint(&cfg.teacher_spec(), BufReader::new(file))
}

fn load_student(cfg: &ExperimentConfig, method: &str, seed: u64) -> Result<Model> {
    let path = cfg.out_dir.join(student_checkpoint_rel(method, seed));
    if !path.exists() {
        return Err(Error::invalid(
            "student checkpoint",
            format!("nothing at {path:?}; run the distill command for {method:?} first"),
        ));
    }
    let file = fs::File::open(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    load_checkpoint(&cfg.student_spec(), BufReader::new(file))
}

fn save_model(cfg: &ExperimentConfig, relative: &str, model: &Model) -> Result<()> {
    let path = cfg.out_dir.join(relative);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    let file = fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    save_checkpoint(&mut w, model).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Students available on disk: (method, seed, checkpoint), in registry
/// order then seed order for deterministic file listings.
fn available_students(cfg: &ExperimentConfig) -> Vec<(String, u64)> {
    let mut found = Vec::new();
    for method in crate::objective::method_names() {
        for &seed in &cfg.seeds {
            if cfg.out_dir.join(student_checkpoint_rel(method, seed)).exists() {
                found.push((method.to_string(), seed));
            }
        }
    }
    found
}

// ── Commands ─────────────────────────────────────────────────────────────

/// Generate the synthetic corpus and write it under `out/corpus`.
pub fn run_gen_data(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let mut mb = ManifestBuilder::new("gen-data", cfg);
    let corpus = build_corpus(&cfg.corpus)?;
    write_corpus(&corpus_dir(cfg), &corpus)?;
    for f in ["corpus/corpus.json", "corpus/train.csv", "corpus/eval.csv", "corpus/trials.csv"] {
        mb.record(f);
    }
    mb.metrics.push(MetricRow::new("train-utterances", corpus.train.len() as f64, "corpus"));
    mb.metrics.push(MetricRow::new("eval-utterances", corpus.eval.len() as f64, "corpus"));
    mb.metrics.push(MetricRow::new("trials", corpus.trials.len() as f64, "corpus"));
    mb.finish("corpus")
}

/// Train the teacher and write its checkpoint plus verification metrics.
pub fn run_train_teacher(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let mut mb = ManifestBuilder::new("train-teacher", cfg);
    let corpus = load_pipeline_corpus(cfg)?;
    let (model, report) = train_teacher_model(cfg, &corpus)?;
    save_model(cfg, "teacher/checkpoint.txt", &model)?;
    mb.record("teacher/checkpoint.txt");

    let aam = cfg.aam()?;
    let v = evaluate_verification(&model, &aam, &corpus, cfg)?;
    let seed = cfg.seeds[0].to_string();
    mb.metrics.push(MetricRow::new("eer", v.eer, seed.clone()));
    mb.metrics.push(MetricRow::new("min-dcf", v.min_dcf, seed.clone()));
    mb.metrics.push(MetricRow::new("accuracy", v.accuracy, seed.clone()));
    if let Some(last) = report.epoch_losses.last() {
        mb.metrics.push(MetricRow::new("final-train-loss", *last, seed));
    }
    let rows = mb.metrics.clone();
    mb.write("teacher/metrics.csv", &metrics_csv(&rows))?;
    mb.finish("teacher")
}

/// Distil students for one method across every configured seed.
pub fn run_distill(cfg: &ExperimentConfig, method_override: Option<&str>) -> Result<RunManifest> {
    let mut cfg = cfg.clone();
    if let Some(m) = method_override {
        cfg.method = m.to_string();
    }
    cfg.validate()?;
    let method = cfg.method.clone();
    let mut mb = ManifestBuilder::new("distill", &cfg);
    let corpus = load_pipeline_corpus(&cfg)?;
    let objective = objective_by_name(&method)?;
    let teacher = if objective.requires_teacher() { Some(load_teacher(&cfg)?) } else { None };
    let aam = cfg.aam()?;

    let mut eers = Vec::new();
    let mut dcfs = Vec::new();
    let mut accs = Vec::new();
    let cache = TeacherCache::new();
    for &seed in &cfg.seeds {
        let (model, report) =
            train_student_model_cached(&cfg, &corpus, teacher.as_ref(), &method, seed, Some(&cache))?;
        let rel = student_checkpoint_rel(&method, seed);
        save_model(&cfg, &rel, &model)?;
        mb.record(&rel);
        let v = evaluate_verification(&model, &aam, &corpus, &cfg)?;
        let s = seed.to_string();
        mb.metrics.push(MetricRow::new("eer", v.eer, s.clone()));
        mb.metrics.push(MetricRow::new("min-dcf", v.min_dcf, s.clone()));
        mb.metrics.push(MetricRow::new("accuracy", v.accuracy, s.clone()));
        if let Some(last) = report.epoch_losses.last() {
            mb.metrics.push(MetricRow::new("final-train-loss", *last, s));
        }
        eers.push(v.eer);
        dcfs.push(v.min_dcf);
        accs.push(v.accuracy);
    }
    mb.metrics.push(MetricRow::new("eer", mean(&eers), "mean"));
    mb.metrics.push(MetricRow::new("min-dcf", mean(&dcfs), "mean"));
    mb.metrics.push(MetricRow::new("accuracy", mean(&accs), "mean"));
    let rows = mb.metrics.clone();
    mb.write(&format!("distill/{method}/metrics.csv"), &metrics_csv(&rows))?;
    mb.finish(&format!("distill/{method}"))
}

/// Saliency maps and time-weight curves for one utterance under every
/// available model, plus teacher-to-student curve distances averaged over
/// the analysis subset.
pub fn run_attribute(cfg: &ExperimentConfig, utterance_id: Option<&str>) -> Result<RunManifest> {
    let mut mb = ManifestBuilder::new("attribute", cfg);
    let corpus = load_pipeline_corpus(cfg)?;
    let teacher = load_teacher(cfg)?;
    let aam = cfg.aam()?;
    let students = available_students(cfg);

    let focus = match utterance_id {
        Some(id) => corpus
            .find(id)
            .ok_or_else(|| Error::invalid("utterance", format!("{id:?} is not in the corpus")))?,
        None => corpus
            .eval
            .first()
            .ok_or_else(|| Error::invalid("corpus", "evaluation split is empty"))?,
    };

    // Saliency exports for the focus utterance, teacher first.
    let mut models: Vec<(String, Model)> = vec![("teacher".into(), teacher.clone())];
    for (method, seed) in &students {
        models.push((format!("{method}-seed{seed}"), load_student(cfg, method, *seed)?));
    }
    for (tag, model) in &models {
        let (ig, curve) = ig_time_curve(model, &aam, focus, cfg.analysis_steps)?;
        let grad = gradient_saliency(model, &aam, &focus.features, focus.speaker_id, AttributionOutput::Logit)?;
        let mut buf = Vec::new();
        write_saliency_csv(&mut buf, &ig).map_err(|e| Error::io("saliency csv", e))?;
        mb.write(&format!("attribution/saliency-ig-{tag}.csv"), &String::from_utf8_lossy(&buf))?;
        let mut meta = Vec::new();
        write_saliency_meta(&mut meta, &ig).map_err(|e| Error::io("saliency meta", e))?;
        mb.write(&format!("attribution/saliency-ig-{tag}.meta"), &String::from_utf8_lossy(&meta))?;
        let mut gbuf = Vec::new();
        write_saliency_csv(&mut gbuf, &grad).map_err(|e| Error::io("saliency csv", e))?;
        mb.write(&format!("attribution/saliency-grad-{tag}.csv"), &String::from_utf8_lossy(&gbuf))?;
        let mut cbuf = Vec::new();
        write_curve_csv(&mut cbuf, &curve).map_err(|e| Error::io("curve csv", e))?;
        mb.write(&format!("attribution/curve-{tag}.csv"), &String::from_utf8_lossy(&cbuf))?;
    }

    // Teacher-to-student curve distances over the analysis subset.
    let subset = analysis_split(cfg, &corpus);
    let teacher_curves = time_curves(&teacher, &aam, subset, cfg.analysis_steps)?;
    let mut csv = String::from("model,seed,mse\n");
    let mut by_method: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (method, seed) in &students {
        let student = load_student(cfg, method, *seed)?;
        let curves = time_curves(&student, &aam, subset, cfg.analysis_steps)?;
        let mse = mean_curve_mse(&teacher_curves, &curves)?;
        csv.push_str(&format!("{method},{seed},{mse}\n"));
        mb.metrics.push(MetricRow::new(&format!("curve-mse-{method}"), mse, seed.to_string()));
        by_method.entry(method.as_str()).or_default().push(mse);
    }
    for (method, values) in &by_method {
        let m = mean(values);
        csv.push_str(&format!("{method},mean,{m}\n"));
        mb.metrics.push(MetricRow::new(&format!("curve-mse-{method}"), m, "mean"));
    }
    mb.write("attribution/curve-mse.csv", &csv)?;
    mb.finish("attribution")
}

/// Mean insertion/deletion curves and their areas for the teacher, an
/// untrained copy of the teacher spec, and every available student.
pub fn run_occlusion(cfg: &ExperimentConfig, accuracy: bool) -> Result<RunManifest> {
    let mut mb = ManifestBuilder::new("occlusion", cfg);
    let corpus = load_pipeline_corpus(cfg)?;
    let aam = cfg.aam()?;
    let subset = analysis_split(cfg, &corpus);

    let untrained = build_model(&cfg.teacher_spec(), derive_seed(cfg.seeds[0], "teacher-init", &[]))?;
    let mut models: Vec<(String, Model)> =
        vec![("teacher".into(), load_teacher(cfg)?), ("untrained".into(), untrained)];
    for (method, seed) in available_students(cfg) {
        models.push((format!("{method}-seed{seed}"), load_student(cfg, &method, seed)?));
    }

    let mut auc_csv = String::from("model,mode,auc\n");
    for (tag, model) in &models {
        let (insertion, deletion) =
            mean_occlusion_curves(model, &aam, subset, cfg.analysis_steps, cfg.occlusion_steps, accuracy)?;
        let mut csv = String::from("fraction,value,mode\n");
        for c in [&insertion, &deletion] {
            for (f, v) in c.fractions.iter().zip(&c.values) {
                csv.push_str(&format!("{f},{v},{}\n", c.mode.name()));
            }
        }
        mb.write(&format!("occlusion/curves-{tag}.csv"), &csv)?;
        for c in [&insertion, &deletion] {
            let auc = curve_auc(c);
            auc_csv.push_str(&format!("{tag},{},{auc}\n", c.mode.name()));
            mb.metrics.push(MetricRow::new(&format!("auc-{}", c.mode.name()), auc, tag.clone()));
        }
    }
    mb.write("occlusion/auc.csv", &auc_csv)?;
    mb.finish("occlusion")
}

/// Ladder distillation at each requested long-segment duration, reporting
/// verification metrics per duration and seed.
pub fn run_ablation_duration(cfg: &ExperimentConfig, durations: &[usize]) -> Result<RunManifest> {
    if durations.is_empty() {
        return Err(Error::invalid("durations", "need at least one duration"));
    }
    for &d in durations {
        if d < cfg.short_frames {
            return Err(Error::invalid("durations", format!("{d} is below short-frames {}", cfg.short_frames)));
        }
        if d > cfg.corpus.frames {
            return Err(Error::invalid(
                "durations",
                format!("{d} exceeds the corpus utterance length {}", cfg.corpus.frames),
            ));
        }
    }
    let mut mb = ManifestBuilder::new("ablate-duration", cfg);
    let corpus = load_pipeline_corpus(cfg)?;
    let teacher = load_teacher(cfg)?;
    let aam = cfg.aam()?;

    let mut csv = String::from("duration,seed,eer,min-dcf\n");
    // Only full-length segments hit the teacher cache, and at most one
    // duration equals the utterance length, so sharing across the sweep
    // is safe.
    let cache = TeacherCache::new();
    for &d in durations {
        let mut run_cfg = cfg.clone();
        run_cfg.method = "iml".into();
        run_cfg.long_frames = d;
        let mut eers = Vec::new();
        let mut dcfs = Vec::new();
        for &seed in &cfg.seeds {
            let (model, _) =
                train_student_model_cached(&run_cfg, &corpus, Some(&teacher), "iml", seed, Some(&cache))?;
            let v = evaluate_verification(&model, &aam, &corpus, &run_cfg)?;
            csv.push_str(&format!("{d},{seed},{},{}\n", v.eer, v.min_dcf));
            mb.metrics.push(MetricRow::new(&format!("eer-long{d}"), v.eer, seed.to_string()));
            eers.push(v.eer);
            dcfs.push(v.min_dcf);
        }
        csv.push_str(&format!("{d},mean,{},{}\n", mean(&eers), mean(&dcfs)));
        mb.metrics.push(MetricRow::new(&format!("eer-long{d}"), mean(&eers), "mean"));
        mb.metrics.push(MetricRow::new(&format!("min-dcf-long{d}"), mean(&dcfs), "mean"));
    }
    mb.write("ablation/durations.csv", &csv)?;
    mb.finish("ablation")
}

/// Aggregate the teacher's and every distilled method's stored metrics
/// into one summary table.
pub fn run_report(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let mut mb = ManifestBuilder::new("report", cfg);
    let mut csv = String::from("model,eer,min-dcf\n");

    let read_rows = |path: &Path| -> Result<Vec<MetricRow>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut rows = Vec::new();
        for line in text.lines().skip(1) {
            let mut parts = line.split(',');
            let (Some(metric), Some(value), Some(seed)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::format("metrics csv", format!("bad row {line:?} in {path:?}")));
            };
            let value: f64 =
                value.parse().map_err(|_| Error::format("metrics csv", format!("bad value in {line:?}")))?;
            rows.push(MetricRow::new(metric, value, seed));
        }
        Ok(rows)
    };
    let pick = |rows: &[MetricRow], metric: &str, seed: &str| -> Option<f64> {
        rows.iter().find(|r| r.metric == metric && r.seed == seed).map(|r| r.value)
    };

    let teacher_metrics = cfg.out_dir.join("teacher/metrics.csv");
    if teacher_metrics.exists() {
        let rows = read_rows(&teacher_metrics)?;
        let seed0 = cfg.seeds[0].to_string();
        if let (Some(eer), Some(dcf)) = (pick(&rows, "eer", &seed0), pick(&rows, "min-dcf", &seed0)) {
            csv.push_str(&format!("teacher,{eer},{dcf}\n"));
            mb.metrics.push(MetricRow::new("eer-teacher", eer, seed0));
        }
    }
    for method in crate::objective::method_names() {
        let path = cfg.out_dir.join(format!("distill/{method}/metrics.csv"));
        if !path.exists() {
            continue;
        }
        let rows = read_rows(&path)?;
        if let (Some(eer), Some(dcf)) = (pick(&rows, "eer", "mean"), pick(&rows, "min-dcf", "mean")) {
            csv.push_str(&format!("{method},{eer},{dcf}\n"));
            mb.metrics.push(MetricRow::new(&format!("eer-{method}"), eer, "mean"));
        }
    }
    mb.write("report/summary.csv", &csv)?;
    mb.finish("report")
}
