//! Dense tensors, a reverse-mode tape, and the Adam optimizer.

mod graph;
mod params;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{AdamConfig, ParamGrads, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite gradient for parameter {param}")]
    NanGradient { param: String },
}

/// Standard deviation of the Normal initialiser for token embeddings.
pub const INIT_STD: f64 = 0.02;

/// Xavier-normal standard deviation for a weight with the given fans.
pub fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}
