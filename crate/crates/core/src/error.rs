use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("binning mismatch: {0}")]
    BinningMismatch(String),

    #[error("bad encoding in {path}: {reason}")]
    BadEncoding { path: PathBuf, reason: String },

    #[error("label value {value} out of range for {classes} classes")]
    ClassOutOfRange { value: u8, classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("source label map has no labelled pixels")]
    EmptySource,

    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("i/o failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
