//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates a precondition (dimension
    /// mismatch, bad parameter range, inconsistent config).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The input is structurally valid but numerically degenerate
    /// (zero column, empty matrix, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A combinatorial request exceeds what can be enumerated or sampled.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// An iterative solver produced non-finite values.
    #[error("numerical failure at iteration {iteration}: {message}")]
    NumericalFailure { iteration: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateInput(msg.into())
    }

    pub fn capacity(msg: impl Into<String>) -> Self {
        Error::Capacity(msg.into())
    }
}
