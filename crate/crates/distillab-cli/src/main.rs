//! Command-line front end for the distillation laboratory.
//!
//! Every subcommand reads the experiment configuration (defaults, or the
//! file named by `--config`), applies any command-line overrides, runs one
//! pipeline stage, and prints the metric rows it recorded. Artifacts land
//! under the configured output directory; each stage writes a
//! `manifest.json` describing exactly what it produced.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use distillab::config::ExperimentConfig;
use distillab::pipeline::{
    run_ablation_duration, run_attribute, run_distill, run_gen_data, run_occlusion, run_report,
    run_train_teacher, RunManifest,
};

#[derive(Parser)]
#[command(
    name = "distillab",
    about = "Reproducible knowledge-distillation experiments on synthetic speaker data",
    version
)]
struct Cli {
    /// Experiment configuration file (`key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Replace the configured seed list with this single seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory root (overrides the configured one).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData,
    /// Train the teacher classifier and record its verification metrics.
    TrainTeacher,
    /// Train students under one distillation objective, one per seed.
    Distill {
        /// Objective to train with (see `--help` for the registry).
        #[arg(long, value_name = "NAME")]
        method: Option<String>,
    },
    /// Write saliency maps, time-weight curves, and teacher-to-student
    /// curve distances for the trained models.
    Attribute {
        /// Utterance to export saliency for (default: first evaluation
        /// utterance).
        #[arg(long, value_name = "ID")]
        utterance: Option<String>,
    },
    /// Insertion/deletion occlusion curves for the trained models.
    Occlusion {
        /// Measure top-1 accuracy instead of target-class probability.
        #[arg(long)]
        accuracy: bool,
    },
    /// Re-train the ladder objective at several long-segment durations.
    AblateDuration {
        /// Comma-separated durations in frames.
        #[arg(long, value_name = "LIST", value_delimiter = ',', default_value = "200,400,600")]
        durations: Vec<usize>,
    },
    /// Aggregate stored metrics into one summary table.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate().context("validating configuration")?;
    Ok(cfg)
}

fn print_manifest(m: &RunManifest) {
    for row in &m.metrics {
        println!("{} [{}] = {}", row.metric, row.seed, row.value);
    }
    println!(
        "{}: wrote {} file(s) in {:.1}s",
        m.command,
        m.files.len(),
        m.wall_clock_seconds
    );
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    let manifest = match &cli.command {
        Command::GenData => run_gen_data(&cfg),
        Command::TrainTeacher => run_train_teacher(&cfg),
        Command::Distill { method } => run_distill(&cfg, method.as_deref()),
        Command::Attribute { utterance } => run_attribute(&cfg, utterance.as_deref()),
        Command::Occlusion { accuracy } => run_occlusion(&cfg, *accuracy),
        Command::AblateDuration { durations } => run_ablation_duration(&cfg, durations),
        Command::Report => run_report(&cfg),
    }?;
    print_manifest(&manifest);
    Ok(())
}
