use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed {format} header: {reason}")]
    MalformedHeader { format: &'static str, reason: String },
    #[error("payload mismatch: header declares {expected} values, found {found}")]
    PayloadMismatch { expected: usize, found: usize },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("duplicate sample_id {0:?}")]
    DuplicateSample(String),
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("zero variance in input descriptors")]
    ZeroVariance,
    #[error("insufficient distinct points: need {needed}, found {found}")]
    InsufficientDistinctPoints { needed: usize, found: usize },
    #[error("need >=2 classes, found {0}")]
    TooFewClasses(usize),
    #[error("matrix is not symmetric: |a[{row}][{col}] - a[{col}][{row}]| = {diff:e}")]
    Asymmetric { row: usize, col: usize, diff: f64 },
    #[error("missing entry {0}")]
    MissingEntry(String),
    #[error("need >=2 groups for leave-one-group-out, found {0}")]
    TooFewGroups(usize),
    #[error("fold {group:?} failed: {source}")]
    Fold {
        group: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
