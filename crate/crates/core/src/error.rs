use std::path::PathBuf;

use thiserror::Error;

/// Coarse error families, used by front-ends to pick exit codes and HTTP statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    Protocol,
    Validation,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected:?}, got {actual:?}")]
    InputShape { expected: Vec<usize>, actual: Vec<usize> },

    #[error("gradient shape mismatch at layer {layer}: {reason}")]
    GradientShape { layer: usize, reason: String },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("checkpoint format error at byte {offset}: {reason}")]
    Checkpoint { offset: usize, reason: String },

    #[error("corpus layout error in {path}: {reason}")]
    CorpusLayout { path: PathBuf, reason: String },

    #[error("image format error: {0}")]
    ImageFormat(String),

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("gain is undefined for an initial accuracy of zero")]
    UndefinedGain,

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("record {0} not found")]
    NotFound(u64),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("invalid request: {0}")]
    Validation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed state file {path} line {line}: {reason}")]
    StateFile {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } | Error::StateFile { .. } | Error::CorpusLayout { .. } => {
                ErrorClass::Io
            }
            Error::Protocol(_) | Error::Conflict(_) | Error::NotFound(_) => ErrorClass::Protocol,
            _ => ErrorClass::Validation,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
