use std::path::PathBuf;

/// Errors raised across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("stream error: {0}")]
    Stream(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("endpoint error: {0}")]
    Endpoint(String),

    #[error("unknown schema version {0}")]
    UnknownVersion(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn contract_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
