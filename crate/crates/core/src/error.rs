use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library surfaces.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("shape mismatch at layer {layer}: {detail}")]
    LayerShape { layer: usize, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("batch normalization in train mode needs at least 2 samples per channel, got {0}")]
    BatchTooSmall(usize),

    #[error("running statistics for `{0}` are not initialized")]
    UninitializedStats(String),

    #[error("tape mismatch: {0}")]
    Tape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("header/payload inconsistency: {0}")]
    Inconsistent(String),

    #[error("malformed header: {0}")]
    Header(String),

    #[error("non-finite {component} loss at epoch {epoch}, iteration {iteration}")]
    Diverged {
        component: String,
        epoch: usize,
        iteration: usize,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Validation failures (bad input, bad config, bad file) as opposed to
    /// runtime failures (I/O, divergence).
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Diverged { .. })
    }
}
