//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("unsupported architecture: {0}")]
    Unsupported(String),
    #[error("query budget exhausted after {0} queries")]
    BudgetExhausted(u64),
    #[error("state error: {0}")]
    State(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
