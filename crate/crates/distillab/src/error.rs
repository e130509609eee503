//! Crate-wide error type.
//!
//! Numerical code fails fast: shape mismatches, domain violations (log of a
//! non-positive value, square root of a negative value) and any operation
//! that produces a NaN or infinity are reported as errors at the point where
//! they occur instead of propagating poison values through a computation.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor construction or primitive application with incompatible shapes.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// Input outside a primitive's domain (e.g. `log` of a non-positive value).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// An operation produced a NaN or infinite value.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// A model or configuration failed validation.
    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },

    /// Training diverged (non-finite loss), reported with the epoch.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    /// Config file parse failure, reported with the line number.
    #[error("config error at line {line}: {detail}")]
    Config { line: usize, detail: String },

    /// A persisted artifact (tensor dump, checkpoint, manifest) is malformed.
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain { op, detail: detail.into() }
    }

    pub fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid { what, detail: detail.into() }
    }

    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format { what, detail: detail.into() }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
