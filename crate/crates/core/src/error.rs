use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("site {0:?} lies outside the domain")]
    OutOfDomain(Vec<i64>),
    #[error("ellipticity violated: {0}")]
    EllipticityViolation(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("domain coverage: {0}")]
    DomainCoverage(String),
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("solver did not converge in {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("problem too large for the dense oracle ({0} unknowns)")]
    SizeGuard(usize),
    #[error("walk left the window at {0:?}")]
    WindowExit(Vec<i64>),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("experiment failed: {0}")]
    Experiment(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
