use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or element counts do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An argument is outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A numerical routine failed its post-hoc validity check.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Every particle log-likelihood for a task underflowed to -inf, so
    /// importance weights cannot be normalized.
    #[error("task {task}: all particle log-likelihoods are -inf")]
    DegenerateTask { task: usize },

    /// Adaptive importance sampling could not produce a usable posterior.
    #[error("inference failure: {0}")]
    Inference(String),

    /// A configuration violates a documented invariant.
    #[error("invalid config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
