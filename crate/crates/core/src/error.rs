use thiserror::Error;

/// Errors raised by the numerical pipeline.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument `{field}`: {reason}")]
    InvalidArgument { field: &'static str, reason: String },

    #[error("dimension mismatch: expected length {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is singular or numerically singular ({0})")]
    Singular(String),

    #[error("matrix is not positive definite (minimum eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("measurement functionals are rank deficient: rank {rank} < {expected}")]
    RankDeficient { rank: usize, expected: usize },

    #[error(
        "duplicate measurement: functionals {first} and {second} snap to the same node {node}"
    )]
    DuplicateMeasurement {
        first: usize,
        second: usize,
        node: usize,
    },

    #[error(
        "posterior variance {value:e} at node {node} is negative beyond rounding (scale {scale:e})"
    )]
    NegativeVariance { node: usize, value: f64, scale: f64 },

    #[error("problem with {size} unknowns exceeds the dense limit {limit}; {hint}")]
    TooLarge {
        size: usize,
        limit: usize,
        hint: &'static str,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("bound violated: {0}")]
    BoundViolation(String),

    #[error("eigen-solver failed: {0}")]
    EigenSolver(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        field,
        reason: reason.into(),
    }
}

pub(crate) fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
