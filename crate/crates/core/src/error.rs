use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("degenerate element {index}: {reason}")]
    DegenerateElement { index: usize, reason: String },
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("nonlinear solve did not converge at step {step}: residual {residual:e} after {iterations} iterations")]
    NonConvergence {
        step: usize,
        residual: f64,
        iterations: usize,
    },
    #[error("causality violation: step {step} accessed {what} index {index}")]
    Causality {
        step: usize,
        what: &'static str,
        index: usize,
    },
    #[error("insufficient samples: {got} < {need}")]
    InsufficientSamples { got: usize, need: usize },
    #[error("configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidParameter(msg.into()))
}
