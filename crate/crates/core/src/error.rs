use thiserror::Error;

/// Errors produced by the core library.
///
/// Messages never carry score values, so they are safe to surface to
/// callers of a private prediction interface.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid confidence vector: {0}")]
    InvalidVector(&'static str),

    #[error("invalid mechanism configuration: {0}")]
    InvalidConfig(&'static str),

    #[error("sub-range index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("candidate set is empty")]
    EmptyCandidates,

    #[error("vectors are not neighboring: {0}")]
    NotNeighboring(&'static str),

    #[error("modified vector is constant; the fixed-point budget is undefined")]
    Degenerate,

    #[error("scores must be strictly positive to compute the fixed-point budget")]
    NonPositiveScore,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("target distance {target} is not achievable (supremum {supremum})")]
    Unachievable { target: f64, supremum: f64 },

    #[error("record is empty")]
    EmptyRecord,

    #[error("cohort is empty")]
    EmptyCohort,

    #[error("invalid cohort specification: {0}")]
    InvalidSpec(&'static str),

    #[error("invalid attack data: {0}")]
    InvalidAttackData(&'static str),

    #[error("logistic regression diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("ledger format error at line {line}: {reason}")]
    LedgerFormat { line: usize, reason: String },

    #[error("ledger parameters do not match the stored header")]
    LedgerParamsMismatch,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
