use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate. Variants follow the failure classes
/// callers need to tell apart: bad arguments, bad data, misuse of the
/// compute graph, and numeric breakdown.
#[derive(Debug, Error)]
pub enum TowerError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Configuration key that failed validation; the CLI reports the key.
    #[error("invalid value for `{key}`: {reason}")]
    ConfigKey { key: String, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("stratification error: class {class} absent from the subsample")]
    Stratification { class: usize },

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("ingestion error at row {row}: {reason}")]
    Ingestion { row: usize, reason: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error in {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    /// Training diverged; `dump` points at the plans of the offending batch.
    #[error("non-finite loss at epoch {epoch}, step {step}; plans dumped to {dump}")]
    Diverged {
        epoch: usize,
        step: usize,
        dump: PathBuf,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TowerError {
    /// True for errors caused by user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            TowerError::Config(_)
                | TowerError::ConfigKey { .. }
                | TowerError::Domain(_)
                | TowerError::Usage(_)
        )
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TowerError::File {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = TowerError> = std::result::Result<T, E>;
