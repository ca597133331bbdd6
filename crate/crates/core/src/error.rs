use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CastleError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CastleError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("CTC target of length {label_len} (with {repeats} repeats) needs more than {frames} frames")]
    Infeasible {
        frames: usize,
        label_len: usize,
        repeats: usize,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<CastleError>,
    },
}

impl CastleError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Innermost error, looking through stage wrappers.
    pub fn root(&self) -> &CastleError {
        match self {
            Self::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
