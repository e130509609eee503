//! Manual calibration probes for choosing default training
//! hyperparameters. Run with
//! `cargo test -p distillab --test calibration -- --ignored --nocapture`.

#![allow(clippy::field_reassign_with_default)]

use std::time::Instant;

use distillab::config::ExperimentConfig;
use distillab::objective::TeacherCache;
use distillab::pipeline::{
    evaluate_verification, train_student_model, train_student_model_cached, train_teacher_model,
};
use distillab::synth::build_corpus;

#[test]
#[ignore = "manual calibration"]
fn hard_corpus_probe() {
    let corpus = build_corpus(&ExperimentConfig::default().corpus).unwrap();
    let aam = ExperimentConfig::default().aam().unwrap();

    let mut best_teacher = None;
    for teacher_lr in [0.002, 0.005] {
        let mut cfg = ExperimentConfig::default();
        cfg.learning_rate = teacher_lr;
        let t = Instant::now();
        let (teacher, _) = train_teacher_model(&cfg, &corpus).unwrap();
        let v = evaluate_verification(&teacher, &aam, &corpus, &cfg).unwrap();
        println!(
            "teacher lr {teacher_lr}: {:.0}s, acc {:.3}, eer {:.4}",
            t.elapsed().as_secs_f64(),
            v.accuracy,
            v.eer
        );
        if best_teacher.is_none() && v.accuracy >= 0.9 {
            best_teacher = Some(teacher);
        }
    }
    let teacher = best_teacher.expect("no teacher reached 90% accuracy");

    let cache = TeacherCache::new();
    for epochs in [10usize] {
        for method in ["baseline", "vanilla-kd", "iml"] {
            let mut cfg = ExperimentConfig::default();
            cfg.learning_rate = 0.002;
            cfg.distill_epochs = epochs;
            let t = Instant::now();
            match train_student_model_cached(&cfg, &corpus, Some(&teacher), method, 1, Some(&cache)) {
                Ok((m, _)) => {
                    let v = evaluate_verification(&m, &aam, &corpus, &cfg).unwrap();
                    println!(
                        "ep{epochs} {method}: {:.0}s, eer {:.4}, acc {:.3}",
                        t.elapsed().as_secs_f64(),
                        v.eer,
                        v.accuracy
                    );
                }
                Err(e) => println!("ep{epochs} {method}: {e}"),
            }
        }
    }
}

#[test]
#[ignore = "manual calibration"]
fn weak_student_probe() {
    let corpus = build_corpus(&ExperimentConfig::default().corpus).unwrap();
    let aam = ExperimentConfig::default().aam().unwrap();

    let mut tcfg = ExperimentConfig::default();
    tcfg.learning_rate = 0.005;
    let t = Instant::now();
    let (teacher, _) = train_teacher_model(&tcfg, &corpus).unwrap();
    let tv = evaluate_verification(&teacher, &aam, &corpus, &tcfg).unwrap();
    println!(
        "teacher lr 0.005: {:.0}s, acc {:.3}, eer {:.4}",
        t.elapsed().as_secs_f64(),
        tv.accuracy,
        tv.eer
    );

    let cache = TeacherCache::new();
    for widths in [vec![8usize, 8, 8], vec![6, 6, 6]] {
        for epochs in [4usize, 8] {
            for method in ["baseline", "vanilla-kd", "iml"] {
                let mut cfg = ExperimentConfig::default();
                cfg.student_widths = widths.clone();
                cfg.learning_rate = 0.005;
                cfg.distill_epochs = epochs;
                let t = Instant::now();
                match train_student_model_cached(&cfg, &corpus, Some(&teacher), method, 1, Some(&cache)) {
                    Ok((m, _)) => {
                        let v = evaluate_verification(&m, &aam, &corpus, &cfg).unwrap();
                        println!(
                            "w{:?} ep{epochs} {method}: {:.0}s, eer {:.4}, acc {:.3}",
                            widths,
                            t.elapsed().as_secs_f64(),
                            v.eer,
                            v.accuracy
                        );
                    }
                    Err(e) => println!("w{widths:?} ep{epochs} {method}: {e}"),
                }
            }
        }
    }
}

#[test]
#[ignore = "manual calibration"]
fn ordering_rehearsal() {
    let corpus = build_corpus(&ExperimentConfig::default().corpus).unwrap();
    let aam = ExperimentConfig::default().aam().unwrap();

    for teacher_lr in [0.01, 0.005] {
        let mut cfg = ExperimentConfig::default();
        cfg.learning_rate = teacher_lr;
        cfg.teacher_epochs = 20;
        let t = Instant::now();
        let (teacher, _) = train_teacher_model(&cfg, &corpus).unwrap();
        let v = evaluate_verification(&teacher, &aam, &corpus, &cfg).unwrap();
        println!(
            "teacher lr {teacher_lr}: {:.0}s, acc {:.3}, eer {:.4}",
            t.elapsed().as_secs_f64(),
            v.accuracy,
            v.eer
        );
    }

    // Students distilled from the known-good teacher.
    let mut tcfg = ExperimentConfig::default();
    tcfg.learning_rate = 0.02;
    let (teacher, _) = train_teacher_model(&tcfg, &corpus).unwrap();

    for distill_lr in [0.005, 0.002] {
        for method in ["baseline", "vanilla-kd", "iml"] {
            let mut cfg = ExperimentConfig::default();
            cfg.learning_rate = distill_lr;
            cfg.distill_epochs = 10;
            let t = Instant::now();
            match train_student_model(&cfg, &corpus, Some(&teacher), method, 1) {
                Ok((m, _)) => {
                    let v = evaluate_verification(&m, &aam, &corpus, &cfg).unwrap();
                    println!(
                        "{method} lr {distill_lr}: {:.0}s, eer {:.4}, acc {:.3}",
                        t.elapsed().as_secs_f64(),
                        v.eer,
                        v.accuracy
                    );
                }
                Err(e) => println!("{method} lr {distill_lr}: {e}"),
            }
        }
    }
}

#[test]
#[ignore = "manual calibration"]
fn teacher_convergence_and_iml_stability() {
    let corpus = build_corpus(&ExperimentConfig::default().corpus).unwrap();

    for lr in [0.05, 0.02] {
        let mut cfg = ExperimentConfig::default();
        cfg.learning_rate = lr;
        cfg.teacher_epochs = 20;
        let t = Instant::now();
        let (teacher, report) = train_teacher_model(&cfg, &corpus).unwrap();
        let aam = cfg.aam().unwrap();
        let v = evaluate_verification(&teacher, &aam, &corpus, &cfg).unwrap();
        println!(
            "teacher lr {lr}: {:.0}s, acc {:.3}, eer {:.4}, losses {:?}",
            t.elapsed().as_secs_f64(),
            v.accuracy,
            v.eer,
            report
                .epoch_losses
                .iter()
                .step_by(4)
                .map(|l| (l * 100.0).round() / 100.0)
                .collect::<Vec<_>>()
        );

        for distill_lr in [0.01, 0.005, 0.002] {
            let mut dcfg = cfg.clone();
            dcfg.learning_rate = distill_lr;
            dcfg.distill_epochs = 2;
            let t = Instant::now();
            match train_student_model(&dcfg, &corpus, Some(&teacher), "iml", 1) {
                Ok((m, _)) => {
                    let v = evaluate_verification(&m, &aam, &corpus, &dcfg).unwrap();
                    println!(
                        "  iml lr {distill_lr}: 2 epochs in {:.0}s, eer {:.4}, acc {:.3}",
                        t.elapsed().as_secs_f64(),
                        v.eer,
                        v.accuracy
                    );
                }
                Err(e) => println!("  iml lr {distill_lr}: {e}"),
            }
        }
    }
}

#[test]
#[ignore = "manual calibration"]
fn method_stability_probe() {
    let cfg = ExperimentConfig::default();
    let corpus = build_corpus(&cfg.corpus).unwrap();
    let aam = cfg.aam().unwrap();

    let t = Instant::now();
    let (teacher, _) = train_teacher_model(&cfg, &corpus).unwrap();
    let tv = evaluate_verification(&teacher, &aam, &corpus, &cfg).unwrap();
    println!(
        "teacher (default lr {}): {:.0}s, acc {:.3}, eer {:.4}",
        cfg.learning_rate,
        t.elapsed().as_secs_f64(),
        tv.accuracy,
        tv.eer
    );

    let cache = TeacherCache::new();
    for (label, method, long) in [
        ("emb-l2", "emb-l2", cfg.long_frames),
        ("emb-cos", "emb-cos", cfg.long_frames),
        ("multi-level", "multi-level", cfg.long_frames),
        ("iml-short", "iml", 200),
    ] {
        let mut dcfg = cfg.clone();
        dcfg.distill_epochs = 2;
        dcfg.long_frames = long;
        let t = Instant::now();
        match train_student_model_cached(&dcfg, &corpus, Some(&teacher), method, 1, Some(&cache)) {
            Ok((m, report)) => {
                let v = evaluate_verification(&m, &aam, &corpus, &dcfg).unwrap();
                println!(
                    "{label}: 2 epochs in {:.0}s, eer {:.4}, acc {:.3}, losses {:?}",
                    t.elapsed().as_secs_f64(),
                    v.eer,
                    v.accuracy,
                    report
                        .epoch_losses
                        .iter()
                        .map(|l| (l * 100.0).round() / 100.0)
                        .collect::<Vec<_>>()
                );
            }
            Err(e) => println!("{label}: {e}"),
        }
    }
}
