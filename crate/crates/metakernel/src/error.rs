//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension or shape mismatch between inputs.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid argument or configuration value.
    #[error("validation error: {0}")]
    Validation(String),

    /// A numeric routine failed (non-convergence, non-finite values).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A matrix that must be invertible is singular to working precision.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// Training produced a non-finite loss.
    #[error("divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    /// A configured resource cap was exceeded.
    #[error("resource cap exceeded: {0}")]
    Resource(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Validation(format!("csv error: {other:?}")),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 numeric, 4 resource.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Validation(_) | Error::Io(_) => 2,
            Error::Numeric(_) | Error::Singular(_) | Error::Divergence { .. } => 3,
            Error::Resource(_) => 4,
        }
    }
}
