use thiserror::Error;

pub type Result<T> = std::result::Result<T, PqlError>;

#[derive(Debug, Error)]
pub enum PqlError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("working covariance is not positive definite (min eigenvalue {min_eigenvalue:.3e})")]
    SingularWorkingCovariance { min_eigenvalue: f64 },

    #[error("cluster {cluster}: random-effect block (Z'WZ + G^-1) is singular")]
    SingularClusterBlock { cluster: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),
}
