use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("malformed model file: {0}")]
    ModelFormat(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("unsupported audio in {path}: {reason}")]
    Audio { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("report error: {0}")]
    Report(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag, used for machine-readable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::ModelFormat(_) => "model-format",
            Error::Manifest(_) => "manifest",
            Error::Audio { .. } => "audio",
            Error::Io { .. } => "io",
            Error::Wav(_) => "wav",
            Error::Json(_) => "json",
            Error::Report(_) => "report",
        }
    }
}

macro_rules! ensure_shape {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Shape(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure_shape;
