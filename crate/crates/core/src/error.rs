use std::io;

use thiserror::Error;

/// Errors produced by the engines, the pipeline scheduler and the training loop.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension overflow: {t_len} x {batch} x {width} does not fit the index space")]
    DimensionOverflow { t_len: usize, batch: usize, width: usize },

    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("time range [{t_lo}, {t_hi}) is out of bounds for t_len {t_len}")]
    TimeRange { t_lo: usize, t_hi: usize, t_len: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("pipeline worker {worker} failed: {reason}")]
    Worker { worker: usize, reason: String },

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("malformed binary data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(expected: impl ToString, actual: impl ToString) -> Error {
    Error::ShapeMismatch {
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
