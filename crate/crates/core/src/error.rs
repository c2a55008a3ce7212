use thiserror::Error;

/// Errors raised by the filtering, model and verification routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("inner ensemble-space system is numerically singular")]
    SingularInnerSolve,

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid Markov chain: {0}")]
    InvalidChain(String),

    #[error("mode k={k} diverges: r^2 exp(-2 gamma_k h) = {factor} >= 1")]
    DivergentMode { k: usize, factor: f64 },

    #[error("Riccati fixed point for mode k={k} did not converge after {iterations} iterations")]
    NoConvergence { k: usize, iterations: usize },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
