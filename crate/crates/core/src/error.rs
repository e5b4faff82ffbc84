use thiserror::Error;

/// Errors produced by the estimator, oracles, simulator, and harness.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument failed validation (non-finite values, bad dimensions,
    /// broken preconditions).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value or combination is unusable.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// The normal-equation system has a null space and no regularization
    /// was supplied to remove it.
    #[error("rank-deficient system: {deficiency} null direction(s) in a {dim}-dimensional Gram matrix")]
    RankDeficient { dim: usize, deficiency: usize },

    /// A command sequence does not excite the model well enough to identify it.
    #[error("insufficient excitation: {0}")]
    Excitation(String),

    /// An internal invariant that should hold by construction was violated.
    #[error("internal invariant violated: {0}")]
    InternalInvariant(String),

    /// Malformed data files or records (traces, model files).
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config/schema, 3 data/IO,
    /// 4 invariant or excitation failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 2,
            Error::InvalidInput(_) | Error::RankDeficient { .. } | Error::Data(_) | Error::Io(_) => 3,
            Error::Excitation(_) | Error::InternalInvariant(_) => 4,
        }
    }
}
