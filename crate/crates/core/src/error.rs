use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("frame rejected: timestamp {current} is not after previous timestamp {previous}")]
    NonMonotoneTimestamp { previous: f64, current: f64 },

    #[error("invalid frame {frame}: {reason}")]
    InvalidFrame { frame: usize, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("unsupported {format} version {found} (expected {expected})")]
    Version {
        format: String,
        expected: u32,
        found: u64,
    },

    #[error("unexpected file format {found:?} (expected {expected:?})")]
    Format { expected: String, found: String },

    #[error("shape mismatch for `{field}`: expected {expected:?}, found {found:?}")]
    Shape {
        field: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("truncated payload: header declares bytes {payload_start}..{expected_end}, file ends at offset {actual_len}")]
    Truncated {
        payload_start: usize,
        expected_end: usize,
        actual_len: usize,
    },

    #[error("checksum mismatch: stored {stored}, computed {computed}")]
    Checksum { stored: String, computed: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("unknown class {0}")]
    UnknownClass(String),

    #[error("class {class} has {count} member(s), at least {required} required")]
    ClassTooSmall {
        class: String,
        count: usize,
        required: usize,
    },

    #[error("stage `{stage}`: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("missing predictions for {} sample(s): {}", .0.len(), .0.join(", "))]
    MissingPredictions(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Wraps the error with the pipeline stage that produced it.
    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
