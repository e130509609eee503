//! # distillab
//!
//! A self-contained, desk-scale laboratory for studying knowledge
//! distillation of small speaker classifiers on deterministic synthetic
//! data. Everything runs in 64-bit floats on a single core, every random
//! draw is seeded, and every pipeline rerun with the same configuration
//! reproduces its output files byte for byte.
//!
//! The crate is organised around a small set of building blocks:
//!
//! - [`tensor`] — dense `f64` tensors plus a tape-based reverse-mode
//!   automatic differentiation engine with a finite-difference oracle.
//! - [`models`] — sliding-window frame layers, statistics pooling, and an
//!   additive-angular-margin classifier head.
//! - [`losses`] — cross-entropy, KL, embedding, and the relation-preserving
//!   batch/class/instance distillation losses, composable on the tape.
//! - [`objective`] — the training objectives (`baseline`, `vanilla-kd`,
//!   `emb-l2`, `emb-cos`, `multi-level`, `iml`) behind one trait, registered
//!   by name and selected at runtime.
//! - [`attribution`] — gradient and integrated-gradients saliency maps and
//!   per-frame time-weight curves.
//! - [`synth`] — the deterministic synthetic speaker corpus.
//! - [`metrics`] — verification metrics (EER, minDCF) and
//!   insertion/deletion occlusion curves.
//! - [`config`], [`trainer`], [`pipeline`] — the reproducible experiment
//!   runner behind the command-line interface.

// Strided kernels and parallel-array loops read clearer with explicit
// indices than with iterator chains.
#![allow(clippy::needless_range_loop)]

pub mod attribution;
pub mod config;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod objective;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{GradientMap, NodeId, Primitive, Tape, Tensor};
