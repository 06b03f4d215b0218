//! Quantization-aware training toolkit: a unified clip/round quantizer with
//! pluggable backward estimators (straight-through, error-scaled, and an
//! additive discretization-error correction with progressive Bernoulli
//! precision replacement), curriculum schedulers, a minimal reverse-mode
//! tensor engine, and a small training harness.

pub mod checkpoint;
pub mod config;
pub mod curriculum;
pub mod data;
pub mod error;
pub mod estimators;
pub mod gradcheck;
pub mod models;
pub mod metrics;
pub mod optim;
pub mod quantizer;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, TensorId};
