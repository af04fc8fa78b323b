use std::path::PathBuf;

use humocon_autograd::ShapeError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("format version mismatch in {path}: expected {expected:?}, found {found:?}")]
    Version { path: PathBuf, expected: String, found: String },
    #[error("integrity error in {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },
    #[error("capability error: {0}")]
    Capability(String),
    #[error("non-finite loss at {stage} step {step} (batch samples {batch:?}): {detail}")]
    NonFinite { stage: u8, step: u64, batch: Vec<usize>, detail: String },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn integrity(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Integrity { path: path.into(), reason: reason.into() }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Self::Serde(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
