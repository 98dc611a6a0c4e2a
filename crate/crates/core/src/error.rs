use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("manifest error: {message} (orphans: {orphans:?})")]
    Manifest { message: String, orphans: Vec<String> },

    #[error("data error in {path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("training aborted at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("checkpoint incompatible with configuration: field `{field}` ({detail})")]
    Incompatible { field: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
