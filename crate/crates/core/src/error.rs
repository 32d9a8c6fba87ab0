use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("segmentation error: {0}")]
    Segmentation(String),

    #[error("budget error: {0}")]
    Budget(String),

    #[error("retention error: {0}")]
    Retention(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("trace error: {0}")]
    Trace(String),

    #[error("validation error at layer {layer}, head {head}, query {query}: {reason}")]
    Validation {
        layer: usize,
        head: usize,
        query: usize,
        reason: String,
    },

    #[error("degenerate curve: {0}")]
    DegenerateCurve(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("arithmetic error: {0}")]
    Arithmetic(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures of the outside world (files, encodings) rather than
    /// of the inputs' semantics. The CLI maps these to exit code 2.
    pub fn is_io_or_format(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Format { .. } | Error::Json(_) | Error::Csv(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
