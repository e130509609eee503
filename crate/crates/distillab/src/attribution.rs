//! Input attribution: gradient saliency, Integrated Gradients, the
//! interpolation ladders they share, and time-axis weight curves.
//!
//! Attribution explains a scalar model output f(x) — here a class logit or
//! probability — by assigning a contribution to every time-frequency cell
//! of the input. The gradient method uses the local derivative at x.
//! Integrated Gradients averages the gradient along the straight path from
//! a baseline x' to x and scales by the displacement:
//!
//! `IG(x) = (x - x') * (1/m) * sum_{k=1..m} grad f(x' + (k/m)(x - x'))`
//!
//! The interpolated inputs of that sum are also exported on their own
//! ([`integrated_inputs`]) because distillation aligns teacher and student
//! outputs on exactly this ladder.
//!
//! The default baseline holds every frame at the per-frequency time mean
//! of the input; a global scalar mean is available as an alternative. The
//! default scalar target is the pre-softmax logit of the chosen class; the
//! post-softmax probability is available behind the same switch.

use std::io::Write;

use crate::error::{Error, Result};
use crate::models::{AamParams, Model};
use crate::tensor::{NodeId, Tape, Tensor};

/// How a saliency map was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttributionMethod {
    Gradient,
    IntegratedGradients,
}

impl AttributionMethod {
    pub fn name(self) -> &'static str {
        match self {
            AttributionMethod::Gradient => "gradient",
            AttributionMethod::IntegratedGradients => "integrated-gradients",
        }
    }
}

/// Which scalar output of the classifier is attributed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttributionOutput {
    /// Pre-softmax logit of the target class (no margin).
    #[default]
    Logit,
    /// Post-softmax probability of the target class.
    Probability,
}

/// Which baseline input the path starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BaselineKind {
    /// Every frame replaced by the per-frequency mean over time.
    #[default]
    TimeMean,
    /// Every cell replaced by the mean over all cells.
    GlobalMean,
}

/// A per-cell attribution map with its provenance.
#[derive(Debug, Clone)]
pub struct Saliency {
    /// `[T, F]` attribution per time-frequency cell.
    pub map: Tensor,
    pub target_class: usize,
    pub method: AttributionMethod,
    /// Step count, present for integrated gradients only.
    pub steps: Option<usize>,
}

/// The interpolation ladder from a baseline to a source input.
#[derive(Debug, Clone)]
pub struct IntegratedInputs {
    /// Step k holds `baseline + (k/m)(source - baseline)`, k = 1..m; the
    /// final step is the source itself, exactly.
    pub steps: Vec<Tensor>,
    pub baseline: Tensor,
    pub source: Tensor,
}

/// Any scalar-valued differentiable function of a feature matrix. The
/// model-bound constructors below cover the classifier outputs; tests use
/// hand-built targets (affine probes) to pin exactness properties.
pub trait AttributionTarget {
    /// Append the computation of the scalar output to `tape`, reading the
    /// input from node `x`, and return the scalar node.
    fn build(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId>;
}

/// A classifier's target-class output: logit (no margin) or probability.
pub struct ClassOutput<'a> {
    pub model: &'a Model,
    pub aam: AamParams,
    pub target: usize,
    pub output: AttributionOutput,
}

impl AttributionTarget for ClassOutput<'_> {
    fn build(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let staged = self.model.stage(tape);
        let emb = staged.embed(tape, x)?;
        let logits = staged.logits(tape, emb, &self.aam, None)?;
        let c = tape.value(logits).shape()[0];
        if self.target >= c {
            return Err(Error::invalid("attribution target", format!("class {} out of 0..{c}", self.target)));
        }
        let picked = match self.output {
            AttributionOutput::Logit => logits,
            AttributionOutput::Probability => tape.softmax(logits)?,
        };
        let mut one_hot = vec![0.0; c];
        one_hot[self.target] = 1.0;
        let oh = tape.leaf(Tensor::new(vec![c], one_hot)?);
        let masked = tape.mul(picked, oh)?;
        tape.reduce_sum(masked, None)
    }
}

/// Gradient of a scalar target with respect to the input, evaluated at `x`.
pub fn input_gradient(f: &dyn AttributionTarget, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let out = f.build(&mut tape, xid)?;
    let grads = tape.backward(out)?;
    Ok(grads.get_or_zeros(xid, x.shape()))
}

/// Evaluate a scalar target at `x` without gradients.
pub fn target_value(f: &dyn AttributionTarget, x: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let out = f.build(&mut tape, xid)?;
    tape.value(out).item()
}

/// Per-frequency mean over time, broadcast back to every frame.
pub fn mean_time_baseline(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || x.shape()[0] == 0 {
        return Err(Error::shape("baseline", format!("expected a non-empty [T, F] matrix, got {:?}", x.shape())));
    }
    let (t, f) = (x.shape()[0], x.shape()[1]);
    let mut means = vec![0.0; f];
    for row in 0..t {
        for (d, m) in means.iter_mut().enumerate() {
            *m += x.row(row)[d];
        }
    }
    for m in &mut means {
        *m /= t as f64;
    }
    let mut data = Vec::with_capacity(t * f);
    for _ in 0..t {
        data.extend_from_slice(&means);
    }
    Tensor::new(vec![t, f], data)
}

/// Mean over all cells, broadcast to the full shape.
pub fn global_mean_baseline(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || x.numel() == 0 {
        return Err(Error::shape("baseline", format!("expected a non-empty [T, F] matrix, got {:?}", x.shape())));
    }
    let mean = x.data().iter().sum::<f64>() / x.numel() as f64;
    Tensor::new(x.shape().to_vec(), vec![mean; x.numel()])
}

/// Baseline of the requested kind.
pub fn baseline_for(x: &Tensor, kind: BaselineKind) -> Result<Tensor> {
    match kind {
        BaselineKind::TimeMean => mean_time_baseline(x),
        BaselineKind::GlobalMean => global_mean_baseline(x),
    }
}

/// The m-step interpolation ladder from `baseline` to `x`. Step m is `x`
/// itself, bit-for-bit.
pub fn integrated_inputs(x: &Tensor, baseline: &Tensor, m: usize) -> Result<IntegratedInputs> {
    if x.shape() != baseline.shape() {
        return Err(Error::shape(
            "integrated-inputs",
            format!("input {:?} vs baseline {:?}", x.shape(), baseline.shape()),
        ));
    }
    if m == 0 {
        return Err(Error::invalid("integrated-inputs", "step count must be at least 1"));
    }
    let mut steps = Vec::with_capacity(m);
    for k in 1..=m {
        if k == m {
            steps.push(x.clone());
        } else {
            let alpha = k as f64 / m as f64;
            let step = baseline.zip_with(x, |b, v| b + alpha * (v - b))?;
            steps.push(step);
        }
    }
    Ok(IntegratedInputs { steps, baseline: baseline.clone(), source: x.clone() })
}

/// Integrated Gradients over a generic scalar target:
/// `(x - baseline) * mean of the gradients along the ladder`.
pub fn integrated_gradients_map(f: &dyn AttributionTarget, x: &Tensor, baseline: &Tensor, m: usize) -> Result<Tensor> {
    let ladder = integrated_inputs(x, baseline, m)?;
    let mut acc = Tensor::zeros(x.shape().to_vec());
    for step in &ladder.steps {
        let g = input_gradient(f, step)?;
        acc = acc.zip_with(&g, |a, b| a + b)?;
    }
    let inv_m = 1.0 / m as f64;
    let mut out = x.zip_with(baseline, |v, b| v - b)?;
    out = out.zip_with(&acc, |d, a| d * a * inv_m)?;
    Ok(out)
}

/// Gradient saliency of a classifier output for one input.
pub fn gradient_saliency(
    model: &Model,
    aam: &AamParams,
    x: &Tensor,
    target: usize,
    output: AttributionOutput,
) -> Result<Saliency> {
    let f = ClassOutput { model, aam: *aam, target, output };
    let map = input_gradient(&f, x)?;
    Ok(Saliency { map, target_class: target, method: AttributionMethod::Gradient, steps: None })
}

/// Integrated Gradients of a classifier output for one input.
pub fn integrated_gradients(
    model: &Model,
    aam: &AamParams,
    x: &Tensor,
    baseline: &Tensor,
    m: usize,
    target: usize,
    output: AttributionOutput,
) -> Result<Saliency> {
    let f = ClassOutput { model, aam: *aam, target, output };
    let map = integrated_gradients_map(&f, x, baseline, m)?;
    Ok(Saliency { map, target_class: target, method: AttributionMethod::IntegratedGradients, steps: Some(m) })
}

/// Per-frame weight: the absolute attributions summed over frequency,
/// normalised to unit L1. An all-zero map falls back to the uniform curve.
pub fn time_weight_curve(s: &Saliency) -> Vec<f64> {
    let t = s.map.shape()[0];
    let mut weights: Vec<f64> = (0..t).map(|row| s.map.row(row).iter().map(|v| v.abs()).sum()).collect();
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return vec![1.0 / t as f64; t];
    }
    for w in &mut weights {
        *w /= total;
    }
    weights
}

/// Mean squared difference between two equal-length weight curves.
pub fn curve_mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("curve-mse", format!("lengths {} vs {}", a.len(), b.len())));
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

// ── CSV export ───────────────────────────────────────────────────────────

/// Saliency map as `t,f,value` rows, one per cell, row-major.
pub fn write_saliency_csv<W: Write>(w: &mut W, s: &Saliency) -> std::io::Result<()> {
    writeln!(w, "t,f,value")?;
    let (t, f) = (s.map.shape()[0], s.map.shape()[1]);
    for row in 0..t {
        for col in 0..f {
            writeln!(w, "{},{},{:.16e}", row, col, s.map.row(row)[col])?;
        }
    }
    Ok(())
}

/// Sidecar metadata for a saliency export: method, step count, target.
pub fn write_saliency_meta<W: Write>(w: &mut W, s: &Saliency) -> std::io::Result<()> {
    let steps = s.steps.map_or("none".to_string(), |m| m.to_string());
    writeln!(w, "method = {}", s.method.name())?;
    writeln!(w, "steps = {steps}")?;
    writeln!(w, "target-class = {}", s.target_class)
}

/// Time-weight curve as `t,weight` rows.
pub fn write_curve_csv<W: Write>(w: &mut W, curve: &[f64]) -> std::io::Result<()> {
    writeln!(w, "t,weight")?;
    for (t, v) in curve.iter().enumerate() {
        writeln!(w, "{},{:.16e}", t, v)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, ModelSpec};
    use crate::rng::seeded_rng;
    use rand::Rng;

    /// f(x) = sum(w * x) + b — gradient is w everywhere, IG is exact.
    struct AffineProbe {
        w: Tensor,
        b: f64,
    }

    impl AttributionTarget for AffineProbe {
        fn build(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
            let w = tape.leaf(self.w.clone());
            let prod = tape.mul(x, w)?;
            let s = tape.reduce_sum(prod, None)?;
            let bias = tape.leaf(Tensor::scalar(self.b)?);
            tape.add(s, bias)
        }
    }

    fn rand_mat(t: usize, f: usize, seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        let data: Vec<f64> = (0..t * f).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![t, f], data).unwrap()
    }

    fn toy_model() -> (Model, AamParams) {
        let spec = ModelSpec {
            input_dim: 3,
            frame_widths: vec![4],
            contexts: vec![3],
            embed_dim: 4,
            num_classes: 4,
        };
        (build_model(&spec, 17).unwrap(), AamParams::new(30.0, 0.2).unwrap())
    }

    #[test]
    fn baseline_hand_values() {
        let x = Tensor::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap();
        let b = mean_time_baseline(&x).unwrap();
        assert_eq!(b.row(0), &[2.0, 4.0]);
        assert_eq!(b.row(1), &[2.0, 4.0]);
        // Idempotent, and a constant input is its own baseline.
        let bb = mean_time_baseline(&b).unwrap();
        assert!(b.max_abs_diff(&bb).unwrap() == 0.0);
        let c = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert!(mean_time_baseline(&c).unwrap().max_abs_diff(&c).unwrap() == 0.0);
        // Global mean collapses to one scalar everywhere.
        let g = global_mean_baseline(&x).unwrap();
        assert!(g.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn ladder_matches_its_definition() {
        let x = Tensor::from_rows(&[vec![2.0, 4.0]]).unwrap();
        let zero = Tensor::zeros(vec![1, 2]);
        let ladder = integrated_inputs(&x, &zero, 2).unwrap();
        assert_eq!(ladder.steps.len(), 2);
        assert_eq!(ladder.steps[0].row(0), &[1.0, 2.0]);
        assert_eq!(ladder.steps[1].row(0), &[2.0, 4.0]);

        // m=1 is just {x}.
        let one = integrated_inputs(&x, &zero, 1).unwrap();
        assert_eq!(one.steps.len(), 1);
        assert_eq!(one.steps[0].data()[0].to_bits(), x.data()[0].to_bits());

        // Degenerate path: x == baseline keeps every step at x.
        let degenerate = integrated_inputs(&x, &x, 4).unwrap();
        for s in &degenerate.steps {
            assert!(s.max_abs_diff(&x).unwrap() == 0.0);
        }

        // Random ladders satisfy the step equation and end exactly at x.
        for m in 1..=16 {
            let x = rand_mat(5, 3, 100 + m as u64);
            let b = rand_mat(5, 3, 200 + m as u64);
            let ladder = integrated_inputs(&x, &b, m).unwrap();
            for (k, step) in ladder.steps.iter().enumerate() {
                let alpha = (k + 1) as f64 / m as f64;
                let want = b.zip_with(&x, |bb, xx| bb + alpha * (xx - bb)).unwrap();
                assert!(step.max_abs_diff(&want).unwrap() <= 1e-12);
            }
            let last = ladder.steps.last().unwrap();
            assert!(last.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert!(integrated_inputs(&x, &zero, 0).is_err());
        assert!(integrated_inputs(&x, &Tensor::zeros(vec![2, 2]), 1).is_err());
    }

    #[test]
    fn affine_probe_gradient_is_its_weights() {
        let w = rand_mat(4, 3, 7);
        let probe = AffineProbe { w: w.clone(), b: 0.25 };
        let x = rand_mat(4, 3, 8);
        let g = input_gradient(&probe, &x).unwrap();
        assert!(g.max_abs_diff(&w).unwrap() <= 1e-12);
    }

    #[test]
    fn integrated_gradients_is_exact_on_affine_targets() {
        let w = rand_mat(4, 3, 9);
        let probe = AffineProbe { w: w.clone(), b: -1.5 };
        let x = rand_mat(4, 3, 10);
        let baseline = mean_time_baseline(&x).unwrap();
        let want = x.zip_with(&baseline, |v, b| v - b).unwrap().zip_with(&w, |d, ww| d * ww).unwrap();
        for m in [1usize, 2, 8, 64] {
            let map = integrated_gradients_map(&probe, &x, &baseline, m).unwrap();
            assert!(map.max_abs_diff(&want).unwrap() <= 1e-10, "m={m}");
        }
        // x == baseline gives the zero map.
        let z = integrated_gradients_map(&probe, &x, &x, 4).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn model_gradient_matches_finite_differences() {
        use crate::tensor::{finite_difference_gradient, grads_match};
        let (model, aam) = toy_model();
        let x = rand_mat(7, 3, 11);
        let s = gradient_saliency(&model, &aam, &x, 2, AttributionOutput::Logit).unwrap();
        assert_eq!(s.map.shape(), x.shape());
        let f = ClassOutput { model: &model, aam, target: 2, output: AttributionOutput::Logit };
        let fd = finite_difference_gradient(&mut |v| target_value(&f, v), &x, 1e-5).unwrap();
        assert!(grads_match(&s.map, &fd).is_none(), "{:?}", grads_match(&s.map, &fd));

        // Probability output differs from the logit output but also
        // matches its own finite differences.
        let sp = gradient_saliency(&model, &aam, &x, 2, AttributionOutput::Probability).unwrap();
        let fp = ClassOutput { model: &model, aam, target: 2, output: AttributionOutput::Probability };
        let fdp = finite_difference_gradient(&mut |v| target_value(&fp, v), &x, 1e-5).unwrap();
        assert!(grads_match(&sp.map, &fdp).is_none());
    }

    #[test]
    fn ig_completeness_error_shrinks_with_more_steps() {
        let (model, aam) = toy_model();
        let x = rand_mat(9, 3, 12);
        let baseline = mean_time_baseline(&x).unwrap();
        let f = ClassOutput { model: &model, aam, target: 1, output: AttributionOutput::Logit };
        let delta = target_value(&f, &x).unwrap() - target_value(&f, &baseline).unwrap();
        let err_at = |m: usize| -> f64 {
            let map = integrated_gradients_map(&f, &x, &baseline, m).unwrap();
            (map.data().iter().sum::<f64>() - delta).abs()
        };
        let e8 = err_at(8);
        let e64 = err_at(64);
        assert!(e64 <= e8 * 1.1, "completeness error should shrink: m=8 {e8}, m=64 {e64}");
    }

    #[test]
    fn time_curves_and_mse_hand_values() {
        // Support on one frame gives a one-hot curve.
        let mut map = Tensor::zeros(vec![4, 2]);
        let s = Saliency { map: map.clone(), target_class: 0, method: AttributionMethod::Gradient, steps: None };
        assert_eq!(time_weight_curve(&s), vec![0.25; 4], "all-zero map falls back to uniform");
        map = Tensor::new(vec![4, 2], vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.5, 0.5]).unwrap();
        let s = Saliency { map, target_class: 0, method: AttributionMethod::Gradient, steps: None };
        let curve = time_weight_curve(&s);
        assert_eq!(curve, vec![0.0, 0.0, 0.0, 1.0]);
        // Constant |attribution| flattens to uniform.
        let flat = Saliency {
            map: Tensor::new(vec![2, 2], vec![0.5, -0.5, 0.5, -0.5]).unwrap(),
            target_class: 0,
            method: AttributionMethod::Gradient,
            steps: None,
        };
        assert_eq!(time_weight_curve(&flat), vec![0.5, 0.5]);

        assert_eq!(curve_mse(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(curve_mse(&curve, &curve).unwrap(), 0.0);
        let a = [0.2, 0.8];
        let b = [0.7, 0.3];
        assert_eq!(curve_mse(&a, &b).unwrap(), curve_mse(&b, &a).unwrap());
        assert!(curve_mse(&a, &[1.0]).is_err());
    }

    #[test]
    fn csv_exports_have_documented_schemas() {
        let (model, aam) = toy_model();
        let x = rand_mat(5, 3, 13);
        let baseline = mean_time_baseline(&x).unwrap();
        let s = integrated_gradients(&model, &aam, &x, &baseline, 4, 3, AttributionOutput::Logit).unwrap();
        let mut csv = Vec::new();
        write_saliency_csv(&mut csv, &s).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,f,value"));
        assert_eq!(text.lines().count(), 1 + 5 * 3);
        assert!(text.lines().nth(1).unwrap().starts_with("0,0,"));

        let mut meta = Vec::new();
        write_saliency_meta(&mut meta, &s).unwrap();
        let meta = String::from_utf8(meta).unwrap();
        assert!(meta.contains("method = integrated-gradients"));
        assert!(meta.contains("steps = 4"));
        assert!(meta.contains("target-class = 3"));

        let curve = time_weight_curve(&s);
        let mut ccsv = Vec::new();
        write_curve_csv(&mut ccsv, &curve).unwrap();
        let ctext = String::from_utf8(ccsv).unwrap();
        assert_eq!(ctext.lines().next(), Some("t,weight"));
        assert_eq!(ctext.lines().count(), 1 + 5);
    }
}
