use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate dimension: {0}")]
    DegenerateDimension(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("checkpoint format error at byte {offset}: {reason}")]
    CheckpointFormat { offset: u64, reason: String },

    #[error("dataset format error at byte {offset}: {reason}")]
    DatasetFormat { offset: u64, reason: String },

    #[error("corrupt record {record} at byte {offset}: label {label} is not below {num_classes}")]
    CorruptRecord {
        record: usize,
        offset: u64,
        label: usize,
        num_classes: usize,
    },

    #[error("invalid value for `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("report schema violation: {0}")]
    Schema(String),

    #[error("non-finite loss at batch {batch}: {detail}")]
    NonFiniteLoss { batch: usize, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
