use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the distillation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate camera pose: {0}")]
    DegeneratePose(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("render backward requires a sample cache (render with `keep_cache`)")]
    MissingCache,

    #[error("numerical guard tripped: {0}")]
    Numerical(String),

    #[error("empty mesh: {0}")]
    EmptyMesh(String),

    #[error("mesh has {faces} faces, above the cap of {cap}; not written")]
    FaceCap { faces: usize, cap: usize },

    #[error("malformed scene: {0}")]
    Scene(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image encoding failed: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
