use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("unsupported datatype: {0}")]
    UnsupportedDatatype(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("unexpected label {label} (declared labels: {declared:?})")]
    UnexpectedLabel { label: i64, declared: Vec<u8> },

    #[error("label {0} is not declared for this volume")]
    UndeclaredLabel(u8),

    #[error("invalid spacing: {0}")]
    InvalidSpacing(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("missing class channel for label {0}")]
    MissingClassChannel(u8),

    #[error("undefined distances: both masks are empty")]
    UndefinedDistances,

    #[error("degenerate sample: all paired differences are zero")]
    DegenerateSample,

    #[error("inconsistent case/fold assignment: {0}")]
    InconsistentFolds(String),

    #[error("case sets differ; missing from A: {missing_in_a:?}; missing from B: {missing_in_b:?}")]
    CaseSetMismatch {
        missing_in_a: Vec<String>,
        missing_in_b: Vec<String>,
    },

    #[error("lesion {index} does not fit inside the volume")]
    LesionOutOfBounds { index: usize },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("invalid metrics table: {0}")]
    MetricsTable(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
