use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid level dimensions {width}x{height}: both must be odd and at least 5")]
    InvalidDimension { width: usize, height: usize },

    #[error("invalid level: {0}")]
    InvalidLevel(String),

    #[error("episode already finished")]
    EpisodeFinished,

    #[error("invalid pooling kernel {kernel} for a {height}x{width} grid")]
    InvalidKernel {
        kernel: usize,
        height: usize,
        width: usize,
    },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("unsupported level kind for this operation: {0}")]
    UnsupportedLevel(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("undefined generalization gap: train mean is zero")]
    UndefinedGap,

    #[error("no data: {0}")]
    NoData(String),

    #[error("corrupt run files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    CorruptRuns(Vec<PathBuf>),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Configuration-class errors map to a distinct CLI exit code.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::InvalidDimension { .. } | Error::InvalidKernel { .. }
        )
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}
