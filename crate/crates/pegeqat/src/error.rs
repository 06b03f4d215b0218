//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("dimension error in {op}: {msg}")]
    Dim { op: &'static str, msg: String },

    /// An operation produced NaN or Inf.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Training stopped on a divergence diagnostic.
    #[error("training aborted at step {step}: {msg}")]
    Diverged { step: u64, msg: String },

    /// Caller violated an operation contract (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An index (e.g. class label) is out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// Invalid configuration value or unknown key.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input file (dataset or checkpoint framing).
    #[error("format error: {0}")]
    Format(String),

    /// Checkpoint is well-formed but incompatible with the target model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Clip interval has zero width.
    #[error("degenerate clip interval: p1 == p2 == {0}")]
    DegenerateInterval(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Dim { op, msg: msg.into() }
    }
}
