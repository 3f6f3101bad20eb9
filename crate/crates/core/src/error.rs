//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or hyperparameter.
    #[error("configuration error: {0}")]
    Config(String),

    /// A named column is missing or the file layout is wrong.
    #[error("schema error: {0}")]
    Schema(String),

    /// A cell failed to parse. `row` is the zero-based data row index.
    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite value produced during a forward or backward pass.
    #[error("numeric error at depth {depth}: {msg}")]
    Numeric { depth: usize, msg: String },

    #[error("undefined loss: {0}")]
    UndefinedLoss(String),

    /// A fairness metric was requested on an empty conditioning cell.
    #[error("undefined metric: empty cell [{cell}]")]
    UndefinedMetric { cell: String },

    /// Invariant violation that indicates a bug, not bad input.
    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
