//! Error type shared by every stage of the pipeline.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate variable '{0}': zero variance")]
    DegenerateVariable(String),

    #[error("bandwidth error: {0}")]
    Bandwidth(String),

    #[error("degenerate bandwidth at unit '{0}': all neighbours coincide with the focal point")]
    DegenerateBandwidth(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("degenerate field: {0}")]
    DegenerateField(String),

    #[error("bandwidth selection failed: {0}")]
    BandwidthSelection(String),

    #[error("learner mismatch: {0}")]
    LearnerMismatch(String),

    #[error("fold construction failed: {0}")]
    Folds(String),

    #[error("missing output of stage '{stage}': {path}")]
    MissingStage { stage: String, path: PathBuf },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::DegenerateVariable(_)
            | Error::Bandwidth(_)
            | Error::DegenerateBandwidth(_)
            | Error::DegenerateLabels(_)
            | Error::Singular(_)
            | Error::DegenerateField(_)
            | Error::BandwidthSelection(_)
            | Error::Folds(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
