use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("eigen decomposition did not converge within {0} sweeps")]
    NoConvergence(usize),

    #[error("sobol dimension {0} exceeds the table maximum of {max}", max = crate::sequences::SOBOL_MAX_DIM)]
    DimTooLarge(usize),

    #[error("antithetic expansion of a zero vector")]
    ZeroVector,

    #[error("bad dimension: {0}")]
    BadDimension(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("tensor rule needs {needed} nodes, budget is {budget}")]
    NodeBudgetExceeded { needed: f64, budget: f64 },

    #[error("dimension reduction not applicable: {0}")]
    NotApplicable(String),

    #[error("survival curve not monotone for row {row}: x'(t) beta = {value}")]
    MonotonicityViolation { row: usize, value: f64 },

    #[error("precision not reached after {n_evals} evaluations (se {std_error:.3e}, estimate {estimate:.6e})")]
    PrecisionNotReached { estimate: f64, std_error: f64, n_evals: u64 },

    #[error("method {method} cannot reach target {target:.1e}")]
    CannotReachTarget { method: String, target: f64 },

    #[error("optimizer failed: {0}")]
    OptimizerFailure(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse { row: usize, column: String, message: String },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
