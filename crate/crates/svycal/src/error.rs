//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A schema constraint was violated (bad level index, duplicate labels, ...).
    #[error("schema violation: {0}")]
    Schema(String),

    /// A data row could not be ingested.
    #[error("ingestion error at row {row}: {message}")]
    Ingestion { row: usize, message: String },

    /// The balance constraints cannot be satisfied.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// The solver stopped before reaching its tolerances.
    #[error("solver did not converge: {0}")]
    NotConverged(String),

    /// An estimator was asked for something the inputs cannot support.
    #[error("estimation error: {0}")]
    Estimation(String),

    /// Dimension or configuration mismatch between components.
    #[error("mismatch: {0}")]
    Mismatch(String),

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
