use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("gradient oracle invalid: {0}")]
    Oracle(String),
    #[error("lookup failed: {0}")]
    Lookup(String),
    #[error("bad container format: {0}")]
    Format(String),
    #[error("missing run artifact: {0}")]
    MissingRun(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
