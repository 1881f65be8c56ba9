use thiserror::Error;

/// Errors produced by the calibration library.
#[derive(Error, Debug)]
pub enum CalibError {
    /// Invalid parameter value (non-positive scale, bad level, ...).
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Input outside the domain a kernel or model is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed or inconsistent data (CSV, duplicate design points, NaN).
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure (singular system, failed factorization).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A candidate calibration function left the feasible box Θ.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// An iterative solve hit its iteration budget without converging.
    #[error("non-convergence: {0}")]
    NonConvergence(String),

    /// Bad request at the API surface (unknown setting id, bad method name).
    #[error("usage error: {0}")]
    Usage(String),

    /// Several sub-tasks failed; the payload lists each failure.
    #[error("all attempts failed: {}", .0.join("; "))]
    Aggregate(Vec<String>),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CalibError>;
