//! Verification-metric cross-checks against brute-force sweeps.

mod common;

use common::{brute_force_eer, brute_force_min_dcf};
use distillab::metrics::{compute_eer, compute_min_dcf, ScoreSet};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-9;

/// Random score set with at least one trial of each kind. Roughly half the
/// draws quantise scores onto a coarse grid so exact threshold ties are
/// common rather than exceptional.
fn random_score_set(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.gen_range(4..60);
    let quantise = rng.gen_bool(0.5);
    let scores: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if quantise {
                (v * 4.0).round() / 4.0
            } else {
                v
            }
        })
        .collect();
    let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
    labels[0] = true;
    labels[1] = false;
    (scores, labels)
}

#[test]
fn eer_matches_brute_force_on_random_score_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5c0e5);
    for case in 0..100 {
        let (scores, labels) = random_score_set(&mut rng);
        let set = ScoreSet::new(scores.clone(), labels.clone()).unwrap();
        let (eer, threshold) = compute_eer(&set).unwrap();
        let (oracle_eer, oracle_threshold) = brute_force_eer(&scores, &labels);
        assert!(
            (eer - oracle_eer).abs() <= TOL,
            "case {case}: eer {eer} vs oracle {oracle_eer}"
        );
        assert!(
            (threshold - oracle_threshold).abs() <= TOL,
            "case {case}: threshold {threshold} vs oracle {oracle_threshold}"
        );
    }
}

#[test]
fn min_dcf_matches_brute_force_on_random_score_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xd0cf);
    for case in 0..100 {
        let (scores, labels) = random_score_set(&mut rng);
        let set = ScoreSet::new(scores.clone(), labels.clone()).unwrap();
        // Exercise the default operating point and a couple of skewed ones.
        for &(p, cm, cf) in &[(0.01, 1.0, 1.0), (0.05, 1.0, 1.0), (0.5, 10.0, 1.0)] {
            let dcf = compute_min_dcf(&set, p, cm, cf).unwrap();
            let oracle = brute_force_min_dcf(&scores, &labels, p, cm, cf);
            assert!(
                (dcf - oracle).abs() <= TOL,
                "case {case} (p={p}, cm={cm}, cf={cf}): {dcf} vs oracle {oracle}"
            );
        }
    }
}
