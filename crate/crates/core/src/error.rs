use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("horizon mismatch: {0}")]
    HorizonMismatch(String),

    #[error("matrix `{name}` is not positive semidefinite (min eigenvalue {min_eig:e})")]
    NotPsd { name: String, min_eig: f64 },

    #[error("matrix `{name}` is not positive definite")]
    NotPd { name: String },

    #[error("covariance `{name}` is singular or ill-conditioned (condition number {cond:e})")]
    SingularCovariance { name: String, cond: f64 },

    #[error("Riccati iteration did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("argument outside the function domain: {0}")]
    DomainError(String),

    #[error("every eigenvalue is zero")]
    AllZero,

    #[error("infeasible configuration: {0}")]
    InfeasibleConfig(String),

    #[error("barrier solver did not converge: {0}")]
    NotConverged(String),

    #[error("line search stalled at barrier parameter {mu:e} (Newton decrement {decrement:e})")]
    LineSearchStall { mu: f64, decrement: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
