use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, R2dError>;

#[derive(Debug, Error)]
pub enum R2dError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image decode error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("failed to load {path}: {msg}")]
    Load { path: PathBuf, msg: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl R2dError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        R2dError::Io {
            path: path.into(),
            source,
        }
    }
}
