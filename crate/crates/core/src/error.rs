//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An op was recorded with incompatible operand shapes.
    #[error("{op}: shape mismatch: {details}")]
    Shape { op: &'static str, details: String },

    /// Backward pass requested on a non-scalar value.
    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("model file error: {0}")]
    ModelSchema(String),

    #[error("score error: {0}")]
    Score(String),

    #[error("wav error: {0}")]
    Wav(String),

    /// Gradients went non-finite inside an optimization loop.
    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGrad { iteration: usize },

    /// The loss went non-finite; carries the trace recorded so far.
    #[error("loss diverged at iteration {iteration}")]
    Diverged { iteration: usize, trace: Vec<f64> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::Shape {
            op,
            details: details.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArg(msg.into())
    }
}
