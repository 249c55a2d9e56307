use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the recognition pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed descriptor file: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncation { expected: u64, found: u64 },

    #[error("integrity violation: {0}")]
    Integrity(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("descriptor set is empty")]
    EmptySet,

    #[error("zero vector for id {id}")]
    ZeroVector { id: String },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("vector is not unit-normalized: {0}")]
    Norm(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("training labels contain a single class")]
    DegenerateLabel,

    #[error("metric is undefined: {0}")]
    UndefinedMetric(String),

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Format(_) => "FormatError",
            Error::Truncation { .. } => "TruncationError",
            Error::Integrity(_) => "IntegrityError",
            Error::Io { .. } => "IoError",
            Error::EmptySet => "EmptySetError",
            Error::ZeroVector { .. } => "ZeroVectorError",
            Error::Param(_) => "ParamError",
            Error::Norm(_) => "NormError",
            Error::Index { .. } => "IndexError",
            Error::DegenerateLabel => "DegenerateLabelError",
            Error::UndefinedMetric(_) => "UndefinedMetricError",
            Error::Generation(_) => "GenerationError",
            Error::Csv(_) => "CsvError",
            Error::Json(_) => "JsonError",
            Error::Stage { source, .. } => source.kind(),
        }
    }

    /// Name of the pipeline stage that failed, if the error was raised by one.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
