use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DcrlError>;

#[derive(Debug, Error)]
pub enum DcrlError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} ({stage})")]
    Numerical {
        stage: &'static str,
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("checkpoint error in field `{field}`: {message}")]
    Checkpoint { field: String, message: String },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl DcrlError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        DcrlError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn checkpoint(field: impl Into<String>, message: impl Into<String>) -> Self {
        DcrlError::Checkpoint {
            field: field.into(),
            message: message.into(),
        }
    }
}
