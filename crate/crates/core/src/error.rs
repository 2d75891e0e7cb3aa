use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("episode already at terminal step {step}; cannot step further")]
    EpisodeOver { step: usize },

    #[error("invalid precondition: {0}")]
    Precondition(String),

    #[error("vector length mismatch: expected {expected}, got {got} ({context})")]
    ShapeMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("not a probability simplex: {0}")]
    BadSimplex(String),

    #[error("enumeration bound exceeded: estimated {estimated} > limit {limit}")]
    EnumerationBound { estimated: u64, limit: u64 },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
