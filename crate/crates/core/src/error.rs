use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("mask violation: {0}")]
    Mask(String),
    #[error("layout error: {0}")]
    Layout(String),
    #[error("trace error: {0}")]
    Trace(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("service error: {0}")]
    Service(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
