//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RqkError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix {0} is not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("positive-definiteness violation: {0}")]
    PositiveDefiniteViolation(String),
    #[error("singular matrix: {0}")]
    SingularMatrix(&'static str),
    #[error("singular square-root factor")]
    SingularFactor,
    #[error("singular diagonal block {0}")]
    SingularBlock(usize),
    #[error("singular capacitance matrix")]
    SingularCapacitance,
    #[error("dense materialisation cap exceeded: {dim} rows > cap {cap}")]
    CapExceeded { dim: usize, cap: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("line search failed after {0} trial evaluations")]
    LineSearchFailed(usize),
    #[error("objective is not finite at the starting point")]
    NonFiniteObjective,
    #[error("optimizer diverged: {0}")]
    OptimizerDiverged(String),
    #[error("mode finding exceeded {0} iterations")]
    MaxIterExceeded(usize),
    #[error("negative entry in the likelihood curvature diagonal")]
    NonConcave,
    #[error("Hessian at the mode is not positive definite")]
    NonSpdHessian,
    #[error("empty mixture")]
    EmptyMixture,
    #[error("benchmark correctness gate failed at n={n}, m={m}: {detail}")]
    BenchGateFailed { n: usize, m: usize, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RqkError>;
