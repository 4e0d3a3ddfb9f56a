use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("alignment error for subject `{subject}`: expected {expected} samples, found {actual}")]
    Alignment {
        subject: String,
        expected: usize,
        actual: usize,
    },

    #[error("parse error in {}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("degenerate class distribution: class `{class}` never occurs")]
    DegenerateDistribution { class: String },

    #[error("empty sequence")]
    EmptySequence,

    #[error("format error in field `{field}`: {message}")]
    Format { field: String, message: String },

    #[error("model kind mismatch: expected {expected}, checkpoint holds {found}")]
    KindMismatch { expected: String, found: String },

    #[error("training aborted at epoch {epoch}, record `{record}`: {message}")]
    TrainingAborted {
        epoch: usize,
        record: String,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
