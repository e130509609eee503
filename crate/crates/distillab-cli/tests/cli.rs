//! End-to-end checks of the installed binary: a miniature experiment run
//! through real process invocations, plus config/flag error handling.

use std::path::Path;
use std::process::Command;

fn distillab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_distillab"))
}

const TINY_CONFIG: &str = "\
speakers = 5
train-per-speaker = 4
eval-per-speaker = 2
feature-dim = 6
frames = 60
target-trials = 5
nontarget-trials = 10
corpus-seed = 21
teacher-widths = 10
teacher-contexts = 3
teacher-embed-dim = 6
student-widths = 6
student-contexts = 3
student-embed-dim = 6
teacher-epochs = 2
distill-epochs = 1
batch-size = 4
learning-rate = 0.01
seeds = 1
short-frames = 16
long-frames = 24
ig-steps = 2
analysis-steps = 3
analysis-utterances = 2
occlusion-steps = 4
";

fn run(dir: &Path, args: &[&str]) -> std::process::Output {
    let config = dir.join("exp.conf");
    distillab()
        .args(args)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .expect("binary should launch")
}

#[test]
fn miniature_experiment_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.conf"), TINY_CONFIG).unwrap();

    let steps: &[&[&str]] = &[
        &["gen-data"],
        &["train-teacher"],
        &["distill", "--method", "baseline"],
        &["distill", "--method", "vanilla-kd"],
        &["attribute"],
        &["occlusion", "--accuracy"],
        &["ablate-duration", "--durations", "16,24"],
        &["report"],
    ];
    for args in steps {
        let out = run(dir.path(), args);
        assert!(
            out.status.success(),
            "{args:?} failed:\n{}\n{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
    }

    let out_dir = dir.path().join("out");
    for f in [
        "corpus/corpus.json",
        "teacher/checkpoint.txt",
        "distill/baseline/metrics.csv",
        "distill/vanilla-kd/checkpoint-seed1.txt",
        "attribution/curve-mse.csv",
        "occlusion/auc.csv",
        "ablation/durations.csv",
        "report/summary.csv",
        "report/manifest.json",
    ] {
        assert!(out_dir.join(f).exists(), "{f} missing after pipeline run");
    }

    let summary = std::fs::read_to_string(out_dir.join("report/summary.csv")).unwrap();
    assert!(summary.contains("teacher,"));
    assert!(summary.contains("vanilla-kd,"));
}

#[test]
fn seed_flag_overrides_the_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.conf"), TINY_CONFIG).unwrap();
    assert!(run(dir.path(), &["gen-data"]).status.success());
    assert!(run(dir.path(), &["train-teacher"]).status.success());
    let out = run(dir.path(), &["distill", "--method", "baseline", "--seed", "9"]);
    assert!(out.status.success());
    let out_dir = dir.path().join("out");
    assert!(out_dir.join("distill/baseline/checkpoint-seed9.txt").exists());
    assert!(!out_dir.join("distill/baseline/checkpoint-seed1.txt").exists());
}

#[test]
fn bad_inputs_produce_clear_failures() {
    let dir = tempfile::tempdir().unwrap();

    // Unknown config key.
    std::fs::write(dir.path().join("exp.conf"), "speakerz = 5\n").unwrap();
    let out = run(dir.path(), &["gen-data"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("speakerz"), "stderr should name the bad key: {err}");

    // Unknown method.
    std::fs::write(dir.path().join("exp.conf"), TINY_CONFIG).unwrap();
    assert!(run(dir.path(), &["gen-data"]).status.success());
    let out = run(dir.path(), &["distill", "--method", "mystery"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("mystery"), "stderr should name the unknown method: {err}");

    // Commands depending on missing artifacts say which stage to run.
    let out = run(dir.path(), &["attribute"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train-teacher"), "stderr should point at the missing stage: {err}");
}
