//! Dense `f64` tensors and a tape-based reverse-mode autodiff engine.
//!
//! A [`Tensor`] is a row-major `Vec<f64>` plus a shape; a scalar has the
//! empty shape `[]`. A [`Tape`] records every primitive application as a
//! node (operation kind, input node ids, forward value), so one forward
//! sweep leaves behind everything [`Tape::backward`] needs. Gradients come
//! back as a [`GradientMap`] keyed by node id, covering the requested loss
//! node and all of its ancestors.
//!
//! Numerical policy:
//! - everything is `f64`; there is no `f32` path;
//! - domain violations (`log` of a non-positive value, `sqrt` of a negative
//!   value) and any NaN/infinity are errors at the producing operation;
//! - `relu` and `sqrt` use the subgradient convention `relu'(0) = 0` and
//!   `sqrt'(0) = 0`, so row-norm style expressions stay finite at zero;
//! - backward walks nodes in reverse insertion order and accumulates
//!   contributions in that fixed order, so two calls on the same record are
//!   bitwise identical.
//!
//! [`finite_difference_gradient`] provides the central-difference oracle
//! used by the gradient checks, and [`grad_close`] implements the
//! comparison rule those checks share (relative error within `1e-4`, with
//! an absolute window of `1e-7` where the reference gradient is tiny).

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

// ── Tensor ───────────────────────────────────────────────────────────────

/// Dense row-major tensor of `f64` values. A scalar has shape `[]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Build a tensor from a shape and row-major values.
    ///
    /// Fails if any dimension is zero, the value count does not match the
    /// shape, or any value is non-finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let n = numel_of(&shape);
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Tensor { shape, data })
    }

    /// Scalar tensor (shape `[]`).
    pub fn scalar(v: f64) -> Result<Tensor> {
        Tensor::new(vec![], vec![v])
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = numel_of(&shape);
        Tensor { shape, data: vec![0.0; n] }
    }

    /// All-one tensor of the given shape.
    pub fn ones(shape: Vec<usize>) -> Tensor {
        let n = numel_of(&shape);
        Tensor { shape, data: vec![1.0; n] }
    }

    /// Rank-2 tensor from rows (all rows must share one length).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::shape("tensor", "no rows"));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("tensor", "ragged rows"));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The number of rows of a rank-2 tensor (or 1 for rank-1/rank-0).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// The trailing-axis length (1 for a scalar).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Row `i` of a rank-2 tensor as a slice (a rank-1 tensor is row 0).
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", format!("expected one element, shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    /// Elementwise map (plain value math, not recorded on any tape).
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// Largest absolute elementwise difference to another tensor.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        let d = self.zip_with(other, |a, b| (a - b).abs())?;
        Ok(d.data.iter().cloned().fold(0.0, f64::max))
    }
}

// ── Plain-value kernels ──────────────────────────────────────────────────
//
// Forward math lives here so the tape and any off-tape callers share one
// implementation per operation.

fn same_or_broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape == b.shape {
        Ok(Broadcast::Same)
    } else if b.rank() == 0 {
        Ok(Broadcast::Scalar)
    } else if b.rank() == 1 && b.shape[0] == a.cols() && a.rank() >= 1 {
        Ok(Broadcast::Row)
    } else {
        Err(Error::shape(op, format!("lhs {:?} vs rhs {:?}", a.shape, b.shape)))
    }
}

/// How the right operand of add/sub/mul maps onto the left one.
#[derive(Clone, Copy, PartialEq)]
enum Broadcast {
    /// Identical shapes.
    Same,
    /// Rhs is a scalar applied to every element.
    Scalar,
    /// Rhs is a vector matching the lhs trailing axis, repeated per row.
    Row,
}

fn ew_combine(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let bc = same_or_broadcast(op, a, b)?;
    let cols = a.cols();
    let data = a
        .data
        .iter()
        .enumerate()
        .map(|(i, &av)| {
            let bv = match bc {
                Broadcast::Same => b.data[i],
                Broadcast::Scalar => b.data[0],
                Broadcast::Row => b.data[i % cols],
            };
            f(av, bv)
        })
        .collect();
    Ok(Tensor { shape: a.shape.clone(), data })
}

/// Reduce a gradient of `a`'s shape back onto broadcast operand `b`.
fn reduce_to_broadcast(g: &Tensor, b_shape: &[usize], bc: Broadcast) -> Tensor {
    match bc {
        Broadcast::Same => g.clone(),
        Broadcast::Scalar => {
            let s: f64 = g.data.iter().sum();
            Tensor { shape: b_shape.to_vec(), data: vec![s] }
        }
        Broadcast::Row => {
            let cols = b_shape[0];
            let mut out = vec![0.0; cols];
            for (i, &v) in g.data.iter().enumerate() {
                out[i % cols] += v;
            }
            Tensor { shape: b_shape.to_vec(), data: out }
        }
    }
}

/// Row-major GEMM over raw slices with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Matrix dimensions of the operands of a matmul, with vector promotion.
///
/// `[m,k] @ [k,n] -> [m,n]`; `[k] @ [k,n] -> [n]`; `[m,k] @ [k] -> [m]`.
fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, Vec<usize>)> {
    match (a.rank(), b.rank()) {
        (2, 2) => {
            let (m, k) = (a.shape[0], a.shape[1]);
            let (k2, n) = (b.shape[0], b.shape[1]);
            if k != k2 {
                return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
            }
            Ok((m, k, n, vec![m, n]))
        }
        (1, 2) => {
            let k = a.shape[0];
            let (k2, n) = (b.shape[0], b.shape[1]);
            if k != k2 {
                return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
            }
            Ok((1, k, n, vec![n]))
        }
        (2, 1) => {
            let (m, k) = (a.shape[0], a.shape[1]);
            let k2 = b.shape[0];
            if k != k2 {
                return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
            }
            Ok((m, k, 1, vec![m]))
        }
        (ra, rb) => Err(Error::shape("matmul", format!("unsupported ranks {ra} and {rb}"))),
    }
}

fn k_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n, out_shape) = matmul_dims(a, b)?;
    let data = gemm(m, k, n, &a.data, k as isize, 1, &b.data, n as isize, 1);
    Ok(Tensor { shape: out_shape, data })
}

fn k_transpose(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::shape("transpose", format!("rank {} input", a.rank())));
    }
    let (r, c) = (a.shape[0], a.shape[1]);
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = a.data[i * c + j];
        }
    }
    Ok(Tensor { shape: vec![c, r], data })
}

/// Softmax over the trailing axis with max subtraction per row.
fn k_softmax(a: &Tensor) -> Result<Tensor> {
    softmax_rows(a, false)
}

fn k_log_softmax(a: &Tensor) -> Result<Tensor> {
    softmax_rows(a, true)
}

fn softmax_rows(a: &Tensor, log: bool) -> Result<Tensor> {
    if a.rank() == 0 {
        return Err(Error::shape("softmax", "scalar input"));
    }
    let cols = a.cols();
    let mut data = vec![0.0; a.numel()];
    for r in 0..a.numel() / cols {
        let row = &a.data[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        let out = &mut data[r * cols..(r + 1) * cols];
        if log {
            let log_denom = denom.ln();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = v - max - log_denom;
            }
        } else {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp() / denom;
            }
        }
    }
    Ok(Tensor { shape: a.shape.clone(), data })
}

fn reduce_axis_check(op: &'static str, a: &Tensor, axis: Option<usize>) -> Result<()> {
    match axis {
        None => Ok(()),
        Some(ax) => {
            if a.rank() != 2 {
                Err(Error::shape(op, format!("axis reduction needs rank 2, got rank {}", a.rank())))
            } else if ax > 1 {
                Err(Error::shape(op, format!("axis {ax} out of range")))
            } else {
                Ok(())
            }
        }
    }
}

fn k_reduce(op: &'static str, a: &Tensor, axis: Option<usize>, mean: bool) -> Result<Tensor> {
    reduce_axis_check(op, a, axis)?;
    match axis {
        None => {
            let mut s = 0.0;
            for &v in &a.data {
                s += v;
            }
            let out = if mean { s / a.numel() as f64 } else { s };
            Ok(Tensor { shape: vec![], data: vec![out] })
        }
        Some(0) => {
            let (r, c) = (a.shape[0], a.shape[1]);
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += a.data[i * c + j];
                }
            }
            if mean {
                for v in &mut out {
                    *v /= r as f64;
                }
            }
            Ok(Tensor { shape: vec![c], data: out })
        }
        Some(_) => {
            let (r, c) = (a.shape[0], a.shape[1]);
            let mut out = vec![0.0; r];
            for i in 0..r {
                let mut s = 0.0;
                for j in 0..c {
                    s += a.data[i * c + j];
                }
                out[i] = if mean { s / c as f64 } else { s };
            }
            Ok(Tensor { shape: vec![r], data: out })
        }
    }
}

fn k_concat_last(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match (a.rank(), b.rank()) {
        (1, 1) => {
            let mut data = a.data.clone();
            data.extend_from_slice(&b.data);
            Ok(Tensor { shape: vec![a.shape[0] + b.shape[0]], data })
        }
        (2, 2) => {
            if a.shape[0] != b.shape[0] {
                return Err(Error::shape(
                    "concat-last",
                    format!("row counts {} vs {}", a.shape[0], b.shape[0]),
                ));
            }
            let (r, ca, cb) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut data = Vec::with_capacity(r * (ca + cb));
            for i in 0..r {
                data.extend_from_slice(&a.data[i * ca..(i + 1) * ca]);
                data.extend_from_slice(&b.data[i * cb..(i + 1) * cb]);
            }
            Ok(Tensor { shape: vec![r, ca + cb], data })
        }
        (ra, rb) => Err(Error::shape("concat-last", format!("ranks {ra} and {rb}"))),
    }
}

fn k_slice_time(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::shape("slice-time", format!("rank {} input", a.rank())));
    }
    let (r, c) = (a.shape[0], a.shape[1]);
    if len == 0 || start + len > r {
        return Err(Error::shape(
            "slice-time",
            format!("rows [{start}, {}) out of 0..{r}", start + len),
        ));
    }
    let data = a.data[start * c..(start + len) * c].to_vec();
    Ok(Tensor { shape: vec![len, c], data })
}

// ── Primitives and the tape ──────────────────────────────────────────────

/// The primitive operations the tape can record.
///
/// Shape rules (errors otherwise):
/// - `MatMul`: `[m,k] @ [k,n] -> [m,n]`, `[k] @ [k,n] -> [n]`, `[m,k] @ [k] -> [m]`.
/// - `Add`/`Sub`/`Mul`: elementwise; the right operand may also be a scalar
///   `[]` or a vector matching the left operand's trailing axis (broadcast
///   across rows). Gradients sum back over broadcast positions.
/// - `Scale(c)`: multiply every element by the finite constant `c`.
/// - `Relu`/`Exp`/`Log`/`Tanh`/`Square`/`Sqrt`: elementwise, any shape.
///   `Log` requires strictly positive inputs, `Sqrt` non-negative ones.
/// - `Softmax`/`LogSoftmax`: over the trailing axis (per row for rank 2),
///   computed with max subtraction.
/// - `ReduceSum`/`ReduceMean`: `None` reduces everything to a scalar `[]`;
///   `Some(0)`/`Some(1)` reduce one axis of a rank-2 tensor.
/// - `ConcatLast`: two tensors of equal rank (1 or 2) joined on the
///   trailing axis.
/// - `StackRows`: n rank-1 tensors of one length stacked into `[n, len]`.
/// - `SliceTime { start, len }`: rows `[start, start+len)` of a rank-2
///   tensor (time is the leading axis).
/// - `Transpose`: rank-2 transpose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Exp,
    Log,
    Tanh,
    Softmax,
    LogSoftmax,
    ReduceSum(Option<usize>),
    ReduceMean(Option<usize>),
    Square,
    Sqrt,
    ConcatLast,
    StackRows,
    SliceTime { start: usize, len: usize },
    Transpose,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::Relu => "relu",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Tanh => "tanh",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log-softmax",
            Primitive::ReduceSum(_) => "reduce-sum",
            Primitive::ReduceMean(_) => "reduce-mean",
            Primitive::Square => "square",
            Primitive::Sqrt => "sqrt",
            Primitive::ConcatLast => "concat-last",
            Primitive::StackRows => "stack-rows",
            Primitive::SliceTime { .. } => "slice-time",
            Primitive::Transpose => "transpose",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::MatMul | Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::ConcatLast => Some(2),
            Primitive::StackRows => None, // n-ary
            _ => Some(1),
        }
    }
}

/// Identifies a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum NodeSource {
    Leaf,
    Applied { prim: Primitive, inputs: Vec<NodeId> },
}

#[derive(Debug, Clone)]
struct Node {
    source: NodeSource,
    value: Tensor,
}

/// An append-only record of a computation: each applied primitive becomes a
/// node holding its operation kind, input ids, and forward value.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf node (an input or constant) and return its id.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { source: NodeSource::Leaf, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn check_ids(&self, prim: Primitive, inputs: &[NodeId]) -> Result<()> {
        if let Some(want) = prim.arity() {
            if inputs.len() != want {
                return Err(Error::shape(
                    prim.name(),
                    format!("expected {want} inputs, got {}", inputs.len()),
                ));
            }
        } else if inputs.is_empty() {
            return Err(Error::shape(prim.name(), "expected at least one input"));
        }
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::invalid("node id", format!("{} out of range", id.0)));
            }
        }
        Ok(())
    }

    /// Apply a primitive to existing nodes, record it, and return the new
    /// node's id. Fails on shape mismatches, domain violations, or if the
    /// result contains a NaN or infinity.
    pub fn apply(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        self.check_ids(prim, inputs)?;
        let value = self.forward(prim, inputs)?;
        if !value.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: prim.name() });
        }
        self.nodes.push(Node { source: NodeSource::Applied { prim, inputs: inputs.to_vec() }, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn forward(&self, prim: Primitive, inputs: &[NodeId]) -> Result<Tensor> {
        let v = |i: usize| &self.nodes[inputs[i].0].value;
        match prim {
            Primitive::MatMul => k_matmul(v(0), v(1)),
            Primitive::Add => ew_combine("add", v(0), v(1), |a, b| a + b),
            Primitive::Sub => ew_combine("sub", v(0), v(1), |a, b| a - b),
            Primitive::Mul => ew_combine("mul", v(0), v(1), |a, b| a * b),
            Primitive::Scale(c) => {
                if !c.is_finite() {
                    return Err(Error::domain("scale", format!("non-finite factor {c}")));
                }
                Ok(v(0).map(|x| c * x))
            }
            Primitive::Relu => Ok(v(0).map(|x| if x > 0.0 { x } else { 0.0 })),
            Primitive::Exp => Ok(v(0).map(f64::exp)),
            Primitive::Log => {
                let a = v(0);
                if let Some(bad) = a.data.iter().find(|x| **x <= 0.0) {
                    return Err(Error::domain("log", format!("input {bad} is not positive")));
                }
                Ok(a.map(f64::ln))
            }
            Primitive::Tanh => Ok(v(0).map(f64::tanh)),
            Primitive::Softmax => k_softmax(v(0)),
            Primitive::LogSoftmax => k_log_softmax(v(0)),
            Primitive::ReduceSum(axis) => k_reduce("reduce-sum", v(0), axis, false),
            Primitive::ReduceMean(axis) => k_reduce("reduce-mean", v(0), axis, true),
            Primitive::Square => Ok(v(0).map(|x| x * x)),
            Primitive::Sqrt => {
                let a = v(0);
                if let Some(bad) = a.data.iter().find(|x| **x < 0.0) {
                    return Err(Error::domain("sqrt", format!("input {bad} is negative")));
                }
                Ok(a.map(f64::sqrt))
            }
            Primitive::ConcatLast => k_concat_last(v(0), v(1)),
            Primitive::StackRows => {
                let len = v(0).shape.first().copied().unwrap_or(0);
                let mut data = Vec::with_capacity(inputs.len() * len);
                for (i, _) in inputs.iter().enumerate() {
                    let t = v(i);
                    if t.rank() != 1 || t.shape[0] != len {
                        return Err(Error::shape(
                            "stack-rows",
                            format!("input {i} has shape {:?}, expected [{len}]", t.shape),
                        ));
                    }
                    data.extend_from_slice(&t.data);
                }
                Tensor::new(vec![inputs.len(), len], data)
            }
            Primitive::SliceTime { start, len } => k_slice_time(v(0), start, len),
            Primitive::Transpose => k_transpose(v(0)),
        }
    }

    // Convenience wrappers; all delegate to `apply`.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Primitive::Scale(c), &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Tanh, &[a])
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Softmax, &[a])
    }
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::LogSoftmax, &[a])
    }
    pub fn reduce_sum(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.apply(Primitive::ReduceSum(axis), &[a])
    }
    pub fn reduce_mean(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.apply(Primitive::ReduceMean(axis), &[a])
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Square, &[a])
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sqrt, &[a])
    }
    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::ConcatLast, &[a, b])
    }
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        self.apply(Primitive::StackRows, rows)
    }
    pub fn slice_time(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.apply(Primitive::SliceTime { start, len }, &[a])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Transpose, &[a])
    }

    /// Reverse-mode sweep from a scalar loss node.
    ///
    /// Returns the gradient of the loss with respect to every ancestor node
    /// (including the loss itself); nodes the loss does not depend on have
    /// no entry. Deterministic: nodes are visited in reverse insertion
    /// order and contributions accumulate in that fixed order.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid("node id", format!("{} out of range", loss.0)));
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss_value.shape),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(loss_value.shape.clone()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].clone() else { continue };
            let NodeSource::Applied { prim, ref inputs } = self.nodes[idx].source else { continue };
            let contributions = self.vjp(prim, inputs, &self.nodes[idx].value, &g)?;
            for (target, contrib) in contributions {
                if !contrib.data.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite { op: prim.name() });
                }
                match &mut grads[target.0] {
                    Some(acc) => {
                        for (a, c) in acc.data.iter_mut().zip(&contrib.data) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(GradientMap { grads })
    }

    /// Vector-Jacobian product: contributions of `g` (gradient at `out`) to
    /// each input of the node.
    fn vjp(&self, prim: Primitive, inputs: &[NodeId], out: &Tensor, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let v = |i: usize| &self.nodes[inputs[i].0].value;
        let one = |t: Tensor| vec![(inputs[0], t)];
        Ok(match prim {
            Primitive::MatMul => {
                let a = v(0);
                let b = v(1);
                let (m, k, n, _) = matmul_dims(a, b)?;
                // dA = g @ B^T, dB = A^T @ g, with vector operands promoted.
                let da = gemm(m, n, k, &g.data, n as isize, 1, &b.data, 1, n as isize);
                let db = gemm(k, m, n, &a.data, 1, k as isize, &g.data, n as isize, 1);
                vec![
                    (inputs[0], Tensor { shape: a.shape.clone(), data: da }),
                    (inputs[1], Tensor { shape: b.shape.clone(), data: db }),
                ]
            }
            Primitive::Add | Primitive::Sub => {
                let a = v(0);
                let b = v(1);
                let bc = same_or_broadcast(prim.name(), a, b)?;
                let mut db = reduce_to_broadcast(g, &b.shape, bc);
                if prim == Primitive::Sub {
                    for x in &mut db.data {
                        *x = -*x;
                    }
                }
                vec![(inputs[0], g.clone()), (inputs[1], db)]
            }
            Primitive::Mul => {
                let a = v(0);
                let b = v(1);
                let bc = same_or_broadcast("mul", a, b)?;
                let da = ew_combine("mul", g, b, |gv, bv| gv * bv)?;
                let g_times_a = g.zip_with(a, |gv, av| gv * av)?;
                let db = reduce_to_broadcast(&g_times_a, &b.shape, bc);
                vec![(inputs[0], da), (inputs[1], db)]
            }
            Primitive::Scale(c) => one(g.map(|x| c * x)),
            Primitive::Relu => one(g.zip_with(v(0), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?),
            Primitive::Exp => one(g.zip_with(out, |gv, yv| gv * yv)?),
            Primitive::Log => one(g.zip_with(v(0), |gv, xv| gv / xv)?),
            Primitive::Tanh => one(g.zip_with(out, |gv, yv| gv * (1.0 - yv * yv))?),
            Primitive::Softmax => {
                // Per row: dx = y * (g - <g, y>).
                let cols = out.cols();
                let mut dx = vec![0.0; out.numel()];
                for r in 0..out.numel() / cols {
                    let y = &out.data[r * cols..(r + 1) * cols];
                    let gr = &g.data[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = y[j] * (gr[j] - dot);
                    }
                }
                one(Tensor { shape: out.shape.clone(), data: dx })
            }
            Primitive::LogSoftmax => {
                // Per row: dx = g - softmax(x) * sum(g).
                let cols = out.cols();
                let mut dx = vec![0.0; out.numel()];
                for r in 0..out.numel() / cols {
                    let y = &out.data[r * cols..(r + 1) * cols];
                    let gr = &g.data[r * cols..(r + 1) * cols];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..cols {
                        dx[r * cols + j] = gr[j] - y[j].exp() * gsum;
                    }
                }
                one(Tensor { shape: out.shape.clone(), data: dx })
            }
            Primitive::ReduceSum(axis) | Primitive::ReduceMean(axis) => {
                let a = v(0);
                let mean = matches!(prim, Primitive::ReduceMean(_));
                let dx = match axis {
                    None => {
                        let scale = if mean { 1.0 / a.numel() as f64 } else { 1.0 };
                        let gv = g.data[0] * scale;
                        Tensor { shape: a.shape.clone(), data: vec![gv; a.numel()] }
                    }
                    Some(0) => {
                        let (r, c) = (a.shape[0], a.shape[1]);
                        let scale = if mean { 1.0 / r as f64 } else { 1.0 };
                        let mut dx = vec![0.0; r * c];
                        for i in 0..r {
                            for j in 0..c {
                                dx[i * c + j] = g.data[j] * scale;
                            }
                        }
                        Tensor { shape: a.shape.clone(), data: dx }
                    }
                    Some(_) => {
                        let (r, c) = (a.shape[0], a.shape[1]);
                        let scale = if mean { 1.0 / c as f64 } else { 1.0 };
                        let mut dx = vec![0.0; r * c];
                        for i in 0..r {
                            for j in 0..c {
                                dx[i * c + j] = g.data[i] * scale;
                            }
                        }
                        Tensor { shape: a.shape.clone(), data: dx }
                    }
                };
                one(dx)
            }
            Primitive::Square => one(g.zip_with(v(0), |gv, xv| 2.0 * xv * gv)?),
            Primitive::Sqrt => {
                // Subgradient convention: derivative 0 where the input is 0.
                one(g.zip_with(out, |gv, yv| if yv == 0.0 { 0.0 } else { 0.5 * gv / yv })?)
            }
            Primitive::ConcatLast => {
                let a = v(0);
                let b = v(1);
                match a.rank() {
                    1 => {
                        let (la, lb) = (a.shape[0], b.shape[0]);
                        vec![
                            (inputs[0], Tensor { shape: vec![la], data: g.data[..la].to_vec() }),
                            (inputs[1], Tensor { shape: vec![lb], data: g.data[la..la + lb].to_vec() }),
                        ]
                    }
                    _ => {
                        let (r, ca, cb) = (a.shape[0], a.shape[1], b.shape[1]);
                        let mut da = Vec::with_capacity(r * ca);
                        let mut db = Vec::with_capacity(r * cb);
                        for i in 0..r {
                            let row = &g.data[i * (ca + cb)..(i + 1) * (ca + cb)];
                            da.extend_from_slice(&row[..ca]);
                            db.extend_from_slice(&row[ca..]);
                        }
                        vec![
                            (inputs[0], Tensor { shape: a.shape.clone(), data: da }),
                            (inputs[1], Tensor { shape: b.shape.clone(), data: db }),
                        ]
                    }
                }
            }
            Primitive::StackRows => {
                let len = v(0).shape[0];
                inputs
                    .iter()
                    .enumerate()
                    .map(|(i, &id)| (id, Tensor { shape: vec![len], data: g.data[i * len..(i + 1) * len].to_vec() }))
                    .collect()
            }
            Primitive::SliceTime { start, len } => {
                let a = v(0);
                let (r, c) = (a.shape[0], a.shape[1]);
                let mut dx = vec![0.0; r * c];
                dx[start * c..(start + len) * c].copy_from_slice(&g.data);
                one(Tensor { shape: a.shape.clone(), data: dx })
            }
            Primitive::Transpose => one(k_transpose(g)?),
        })
    }
}

/// Gradients from one backward sweep, indexed by node id.
#[derive(Debug)]
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    /// Gradient of the loss with respect to the given node, if the loss
    /// depends on it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a node, or a zero tensor of the given shape when the
    /// loss does not depend on it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

// ── Finite-difference oracle ─────────────────────────────────────────────

/// Central-difference gradient of a scalar-valued function at `x`:
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` per coordinate.
pub fn finite_difference_gradient(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::domain("finite-difference", format!("step {eps} must be positive")));
    }
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let hi = f(&probe)?;
        probe.data[i] = orig - eps;
        let lo = f(&probe)?;
        probe.data[i] = orig;
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Comparison rule shared by all gradient checks: relative error at most
/// `1e-4`, falling back to an absolute window of `1e-7` where the reference
/// gradient is smaller than `1e-4` in magnitude.
pub fn grad_close(actual: f64, reference: f64) -> bool {
    if reference.abs() < 1e-4 {
        (actual - reference).abs() <= 1e-7
    } else {
        ((actual - reference) / reference).abs() <= 1e-4
    }
}

/// Check a whole gradient tensor against a finite-difference reference.
/// Returns the first offending coordinate, if any.
pub fn grads_match(actual: &Tensor, reference: &Tensor) -> Option<(usize, f64, f64)> {
    debug_assert_eq!(actual.shape(), reference.shape());
    for (i, (&a, &r)) in actual.data().iter().zip(reference.data()).enumerate() {
        if !grad_close(a, r) {
            return Some((i, a, r));
        }
    }
    None
}

// ── Text dump format ─────────────────────────────────────────────────────
//
// One tensor is serialised as a header line `name rank dim0 dim1 ...`
// followed by the row-major values, whitespace-separated, printed with 17
// significant digits so an f64 round-trips exactly.

/// Serialise one named tensor to the text dump format.
pub fn write_dump<W: Write>(w: &mut W, name: &str, t: &Tensor) -> std::io::Result<()> {
    debug_assert!(!name.is_empty() && !name.contains(char::is_whitespace), "dump names must be single tokens");
    let mut header = String::new();
    let _ = write!(header, "{name} {}", t.rank());
    for d in t.shape() {
        let _ = write!(header, " {d}");
    }
    writeln!(w, "{header}")?;
    for chunk in t.data().chunks(8) {
        let line = chunk.iter().map(|v| format!("{v:.16e}")).collect::<Vec<_>>().join(" ");
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// A whitespace-token reader over buffered input, used by the dump and
/// checkpoint parsers.
pub(crate) struct TokenReader<R> {
    reader: R,
    pending: Vec<String>,
    next: usize,
}

impl<R: BufRead> TokenReader<R> {
    pub(crate) fn new(reader: R) -> Self {
        TokenReader { reader, pending: Vec::new(), next: 0 }
    }

    pub(crate) fn token(&mut self, what: &'static str) -> Result<String> {
        loop {
            if self.next < self.pending.len() {
                let t = self.pending[self.next].clone();
                self.next += 1;
                return Ok(t);
            }
            let mut line = String::new();
            let n = self
                .reader
                .read_line(&mut line)
                .map_err(|e| Error::io("(stream)", e))?;
            if n == 0 {
                return Err(Error::format(what, "unexpected end of input"));
            }
            self.pending = line.split_whitespace().map(str::to_string).collect();
            self.next = 0;
        }
    }

    pub(crate) fn usize_token(&mut self, what: &'static str) -> Result<usize> {
        let t = self.token(what)?;
        t.parse::<usize>().map_err(|_| Error::format(what, format!("expected an integer, got {t:?}")))
    }

    pub(crate) fn f64_token(&mut self, what: &'static str) -> Result<f64> {
        let t = self.token(what)?;
        t.parse::<f64>().map_err(|_| Error::format(what, format!("expected a number, got {t:?}")))
    }
}

/// Read one named tensor previously written by [`write_dump`].
pub fn read_dump<R: BufRead>(r: &mut R) -> Result<(String, Tensor)> {
    let mut tr = TokenReader::new(r);
    read_dump_tokens(&mut tr)
}

pub(crate) fn read_dump_tokens<R: BufRead>(tr: &mut TokenReader<R>) -> Result<(String, Tensor)> {
    let name = tr.token("tensor dump")?;
    let rank = tr.usize_token("tensor dump")?;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(tr.usize_token("tensor dump")?);
    }
    let n = numel_of(&shape);
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(tr.f64_token("tensor dump")?);
    }
    Ok((name, Tensor::new(shape, data)?))
}
