use thiserror::Error;

use crate::types::RequestId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("non-finite value in {0}")]
    Numeric(&'static str),

    #[error("invalid decision distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid label set: {0}")]
    LabelSet(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("obfuscator pool has no qualifying obfuscator for label {label}")]
    PoolCoverage { label: usize },

    #[error("obfuscator pool too shallow for label {label}: need {required}, have {available}")]
    PoolDepth {
        label: usize,
        required: usize,
        available: usize,
    },

    #[error("correlation ledger conflict: {0}")]
    LedgerConflict(String),

    #[error("unbalanced resolution input: expected {expected} couples, got {actual}")]
    Balance { expected: usize, actual: usize },

    #[error("incomplete batch: {} response(s) missing", missing.len())]
    IncompleteBatch { missing: Vec<RequestId> },

    #[error("division by zero in {0}")]
    DivisionByZero(&'static str),

    #[error("empty census")]
    EmptyCensus,

    #[error("transport error: {0}")]
    Transport(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("correlation error: sent {sent}, received {received}")]
    Correlation { sent: RequestId, received: RequestId },

    #[error("pprg plug-in failed: {0}")]
    Plugin(String),
}
