use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes violate an operation's contract.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric overflow in {op}: non-finite value produced")]
    NumericOverflow { op: &'static str },

    /// Operation invoked in the wrong lifecycle state (e.g. backward on an empty tape).
    #[error("invalid state: {0}")]
    State(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    /// A structural invariant that should be unreachable was violated.
    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("failed to ingest {}: {reason}", path.display())]
    Ingestion { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("ledger parse error at row {row}: {reason}")]
    LedgerParse { row: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
