use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    /// A metric or cost is undefined for this input (zero gradients, zero losses).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("matrix is not positive semidefinite (eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("problem evaluation failed: {0}")]
    Problem(String),

    #[error("trace line {line}: {message}")]
    Trace { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn degenerate(msg: impl Into<String>) -> Error {
    Error::Degenerate(msg.into())
}
