//! Helpers shared by the gradient-check and acceptance test targets.
//!
//! The central routine builds, for each primitive, a scalar probe function
//! `loss(inputs) = sum(primitive(inputs) * R)` with a fixed random weight
//! tensor `R`, then compares the tape's backward gradients against the
//! central-difference oracle for every input coordinate.

#![allow(dead_code)]

use distillab::tensor::{
    finite_difference_gradient, grads_match, Primitive, Tape, Tensor,
};
use distillab::Result;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random tensor with entries drawn uniformly from `[lo, hi]`.
pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product::<usize>().max(1);
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Evaluate `sum(prim(inputs) * weights)` on a fresh tape.
fn probe_loss(prim: Primitive, inputs: &[Tensor], weights: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = tape.apply(prim, &ids)?;
    let w = tape.leaf(weights.clone());
    let weighted = tape.mul(out, w)?;
    let loss = tape.reduce_sum(weighted, None)?;
    tape.value(loss).item()
}

/// Backward gradients of the probe loss with respect to every input.
fn probe_grads(prim: Primitive, inputs: &[Tensor], weights: &Tensor) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let ids: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = tape.apply(prim, &ids)?;
    let w = tape.leaf(weights.clone());
    let weighted = tape.mul(out, w)?;
    let loss = tape.reduce_sum(weighted, None)?;
    let grads = tape.backward(loss)?;
    Ok(ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| grads.get_or_zeros(id, t.shape()))
        .collect())
}

/// Gradient-check one primitive on the given inputs. Returns a description
/// of the first failure, if any.
pub fn check_primitive(label: &str, prim: Primitive, inputs: &[Tensor], seed: u64) -> std::result::Result<(), String> {
    let mut r = rng(seed);
    // Output shape comes from a dry forward run.
    let mut tape = Tape::new();
    let ids: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = tape.apply(prim, &ids).map_err(|e| format!("{label}: forward failed: {e}"))?;
    let weights = rand_tensor(tape.value(out).shape(), -1.0, 1.0, &mut r);

    let analytic = probe_grads(prim, inputs, &weights).map_err(|e| format!("{label}: backward failed: {e}"))?;
    for (i, input) in inputs.iter().enumerate() {
        let mut f = |probe: &Tensor| {
            let mut varied: Vec<Tensor> = inputs.to_vec();
            varied[i] = probe.clone();
            probe_loss(prim, &varied, &weights)
        };
        let fd = finite_difference_gradient(&mut f, input, FD_EPS)
            .map_err(|e| format!("{label}: finite differences failed: {e}"))?;
        if let Some((coord, got, want)) = grads_match(&analytic[i], &fd) {
            return Err(format!(
                "{label}: input {i} coordinate {coord}: backward {got} vs finite-difference {want}"
            ));
        }
    }
    Ok(())
}

/// The full per-primitive sweep: every primitive kind, including broadcast
/// and vector-promotion variants, each against the finite-difference
/// oracle. Inputs are sampled away from kinks and domain edges (documented
/// per case). Returns the list of failures (empty on success).
pub fn check_all_primitives() -> Vec<String> {
    let mut r = rng(0x5eed);
    let mut failures = Vec::new();
    let mut run = |label: &str, prim: Primitive, inputs: &[Tensor], seed: u64| {
        if let Err(e) = check_primitive(label, prim, inputs, seed) {
            failures.push(e);
        }
    };

    let a23 = rand_tensor(&[2, 3], -2.0, 2.0, &mut r);
    let b23 = rand_tensor(&[2, 3], -2.0, 2.0, &mut r);
    let row3 = rand_tensor(&[3], -2.0, 2.0, &mut r);
    let scalar = rand_tensor(&[], -2.0, 2.0, &mut r);

    run("matmul [2,3]x[3,2]", Primitive::MatMul, &[a23.clone(), rand_tensor(&[3, 2], -2.0, 2.0, &mut r)], 1);
    run("matmul [3]x[3,2]", Primitive::MatMul, &[row3.clone(), rand_tensor(&[3, 2], -2.0, 2.0, &mut r)], 2);
    run("matmul [2,3]x[3]", Primitive::MatMul, &[a23.clone(), row3.clone()], 3);

    run("add same shape", Primitive::Add, &[a23.clone(), b23.clone()], 4);
    run("add row broadcast", Primitive::Add, &[a23.clone(), row3.clone()], 5);
    run("add scalar broadcast", Primitive::Add, &[a23.clone(), scalar.clone()], 6);
    run("sub same shape", Primitive::Sub, &[a23.clone(), b23.clone()], 7);
    run("sub row broadcast", Primitive::Sub, &[a23.clone(), row3.clone()], 8);
    run("sub scalar broadcast", Primitive::Sub, &[a23.clone(), scalar.clone()], 9);
    run("mul same shape", Primitive::Mul, &[a23.clone(), b23.clone()], 10);
    run("mul row broadcast", Primitive::Mul, &[a23.clone(), row3.clone()], 11);
    run("mul scalar broadcast", Primitive::Mul, &[a23.clone(), scalar.clone()], 12);

    run("scale 1.7", Primitive::Scale(1.7), std::slice::from_ref(&a23), 13);
    run("scale -0.3", Primitive::Scale(-0.3), std::slice::from_ref(&a23), 14);

    // Relu inputs are kept away from the kink at zero, where a central
    // difference straddles the non-differentiable point.
    let relu_in = {
        let t = rand_tensor(&[2, 3], 0.1, 2.0, &mut r);
        let signs = rand_tensor(&[2, 3], -1.0, 1.0, &mut r).map(f64::signum);
        t.zip_with(&signs, |a, s| a * s).unwrap()
    };
    run("relu", Primitive::Relu, &[relu_in], 15);

    run("exp", Primitive::Exp, std::slice::from_ref(&a23), 16);
    run("tanh", Primitive::Tanh, std::slice::from_ref(&a23), 17);
    run("square", Primitive::Square, std::slice::from_ref(&a23), 18);
    // Log and sqrt inputs stay well inside their domains.
    run("log", Primitive::Log, &[rand_tensor(&[2, 3], 0.3, 3.0, &mut r)], 19);
    run("sqrt", Primitive::Sqrt, &[rand_tensor(&[2, 3], 0.5, 3.0, &mut r)], 20);

    run("softmax rank-1", Primitive::Softmax, &[rand_tensor(&[4], -2.0, 2.0, &mut r)], 21);
    run("softmax rank-2", Primitive::Softmax, &[rand_tensor(&[2, 4], -2.0, 2.0, &mut r)], 22);
    run("log-softmax rank-1", Primitive::LogSoftmax, &[rand_tensor(&[4], -2.0, 2.0, &mut r)], 23);
    run("log-softmax rank-2", Primitive::LogSoftmax, &[rand_tensor(&[2, 4], -2.0, 2.0, &mut r)], 24);

    let m34 = rand_tensor(&[3, 4], -2.0, 2.0, &mut r);
    run("reduce-sum all", Primitive::ReduceSum(None), std::slice::from_ref(&m34), 25);
    run("reduce-sum axis 0", Primitive::ReduceSum(Some(0)), std::slice::from_ref(&m34), 26);
    run("reduce-sum axis 1", Primitive::ReduceSum(Some(1)), std::slice::from_ref(&m34), 27);
    run("reduce-mean all", Primitive::ReduceMean(None), std::slice::from_ref(&m34), 28);
    run("reduce-mean axis 0", Primitive::ReduceMean(Some(0)), std::slice::from_ref(&m34), 29);
    run("reduce-mean axis 1", Primitive::ReduceMean(Some(1)), std::slice::from_ref(&m34), 30);

    run(
        "concat-last rank-1",
        Primitive::ConcatLast,
        &[rand_tensor(&[3], -2.0, 2.0, &mut r), rand_tensor(&[4], -2.0, 2.0, &mut r)],
        31,
    );
    run(
        "concat-last rank-2",
        Primitive::ConcatLast,
        &[rand_tensor(&[2, 2], -2.0, 2.0, &mut r), rand_tensor(&[2, 3], -2.0, 2.0, &mut r)],
        32,
    );
    run(
        "stack-rows",
        Primitive::StackRows,
        &[
            rand_tensor(&[4], -2.0, 2.0, &mut r),
            rand_tensor(&[4], -2.0, 2.0, &mut r),
            rand_tensor(&[4], -2.0, 2.0, &mut r),
        ],
        33,
    );
    run("slice-time", Primitive::SliceTime { start: 1, len: 3 }, &[rand_tensor(&[5, 3], -2.0, 2.0, &mut r)], 34);
    run("transpose", Primitive::Transpose, &[rand_tensor(&[2, 4], -2.0, 2.0, &mut r)], 35);

    failures
}

// ── Randomly composed scalar graphs ──────────────────────────────────────

/// A leaf-to-scalar graph composed of three randomly chosen op layers over
/// seeded random leaves. Returns (loss value, leaf gradients) built on a
/// fresh tape from the given leaf values.
fn composed_graph(seed: u64, leaves: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    let mut r = rng(seed);
    let mut tape = Tape::new();
    let ids: Vec<_> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();

    // Pool of rank-2 [2,3] values to combine; ops stay inside safe domains.
    let mut pool = ids.clone();
    for _ in 0..3 {
        let pick = r.gen_range(0..pool.len());
        let other = r.gen_range(0..pool.len());
        let a = pool[pick];
        let b = pool[other];
        let next = match r.gen_range(0..7u32) {
            0 => tape.add(a, b)?,
            1 => tape.sub(a, b)?,
            2 => tape.mul(a, b)?,
            3 => tape.tanh(a)?,
            4 => tape.scale(a, 0.7)?,
            5 => tape.softmax(a)?,
            _ => {
                let sq = tape.square(a)?;
                tape.scale(sq, 0.5)?
            }
        };
        pool.push(next);
    }
    let last = *pool.last().unwrap();
    let loss = tape.reduce_mean(last, None)?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    let leaf_grads = ids.iter().zip(leaves).map(|(&id, t)| grads.get_or_zeros(id, t.shape())).collect();
    Ok((value, leaf_grads))
}

/// Gradient-check three randomly composed 3-layer scalar graphs with fixed
/// seeds. Returns failures (empty on success).
pub fn check_composed_graphs() -> Vec<String> {
    let mut failures = Vec::new();
    for seed in [11u64, 12, 13] {
        let mut r = rng(seed ^ 0xabcd);
        let leaves: Vec<Tensor> = (0..3).map(|_| rand_tensor(&[2, 3], -1.5, 1.5, &mut r)).collect();
        let (_, analytic) = match composed_graph(seed, &leaves) {
            Ok(v) => v,
            Err(e) => {
                failures.push(format!("graph seed {seed}: build failed: {e}"));
                continue;
            }
        };
        for i in 0..leaves.len() {
            let mut f = |probe: &Tensor| {
                let mut varied = leaves.clone();
                varied[i] = probe.clone();
                composed_graph(seed, &varied).map(|(v, _)| v)
            };
            let fd = match finite_difference_gradient(&mut f, &leaves[i], FD_EPS) {
                Ok(v) => v,
                Err(e) => {
                    failures.push(format!("graph seed {seed}: finite differences failed: {e}"));
                    continue;
                }
            };
            if let Some((coord, got, want)) = grads_match(&analytic[i], &fd) {
                failures.push(format!(
                    "graph seed {seed}: leaf {i} coordinate {coord}: backward {got} vs finite-difference {want}"
                ));
            }
        }
    }
    failures
}

// ── Brute-force scoring oracles ──────────────────────────────────────────
//
// Independent re-derivations of the equal-error-rate and minimum-cost
// sweeps: direct counting loops over every candidate threshold, no sorting
// or binary search. Quadratic, but unarguable.

/// (FAR, FRR) at threshold `t` by direct counting: a non-target strictly
/// above `t` is a false accept, a target strictly below `t` a false reject.
fn rates_at(scores: &[f64], labels: &[bool], t: f64) -> (f64, f64) {
    let mut fa = 0usize;
    let mut fr = 0usize;
    let mut n_target = 0usize;
    let mut n_nontarget = 0usize;
    for (&s, &l) in scores.iter().zip(labels) {
        if l {
            n_target += 1;
            if s < t {
                fr += 1;
            }
        } else {
            n_nontarget += 1;
            if s > t {
                fa += 1;
            }
        }
    }
    (fa as f64 / n_nontarget as f64, fr as f64 / n_target as f64)
}

fn ascending_distinct(scores: &[f64]) -> Vec<f64> {
    let mut ts: Vec<f64> = Vec::new();
    for &s in scores {
        if !ts.contains(&s) {
            ts.push(s);
        }
    }
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts
}

/// Equal error rate by exhaustive sweep: lowest threshold minimising
/// |FAR - FRR|, EER = midpoint of the two rates there.
pub fn brute_force_eer(scores: &[f64], labels: &[bool]) -> (f64, f64) {
    let mut best: Option<(f64, f64)> = None;
    let mut best_gap = f64::INFINITY;
    for t in ascending_distinct(scores) {
        let (far, frr) = rates_at(scores, labels, t);
        let gap = (far - frr).abs();
        if gap < best_gap {
            best_gap = gap;
            best = Some(((far + frr) / 2.0, t));
        }
    }
    best.expect("non-empty score list")
}

/// Minimum normalised detection cost by exhaustive sweep.
pub fn brute_force_min_dcf(
    scores: &[f64],
    labels: &[bool],
    p_target: f64,
    c_miss: f64,
    c_fa: f64,
) -> f64 {
    let mut best = f64::INFINITY;
    for t in ascending_distinct(scores) {
        let (far, frr) = rates_at(scores, labels, t);
        let dcf = c_miss * frr * p_target + c_fa * far * (1.0 - p_target);
        if dcf < best {
            best = dcf;
        }
    }
    best / (c_miss * p_target).min(c_fa * (1.0 - p_target))
}
