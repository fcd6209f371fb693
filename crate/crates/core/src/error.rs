use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FlareError>;

#[derive(Debug, Error)]
pub enum FlareError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },

    #[error("{path}: row {row}: label `{value}` is not 0 or 1")]
    BadLabel {
        path: PathBuf,
        row: usize,
        value: String,
    },

    #[error("{path}: row {row}: expected {expected} fields, found {found}")]
    RaggedRow {
        path: PathBuf,
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("{path}: row {row}: column `{column}` value `{value}` is not a finite number")]
    BadNumber {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
    },

    #[error("io error on {path}: {source}")]
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

impl FlareError {
    /// Numeric failures (divergence, NaN) versus everything else; the CLI maps
    /// these to distinct exit codes.
    pub fn is_numeric(&self) -> bool {
        matches!(self, FlareError::NonFinite(_))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FlareError::Io {
            path: path.into(),
            source,
        }
    }
}
