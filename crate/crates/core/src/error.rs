use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("a filter needs at least one IMU")]
    NoImus,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid propagation step {0} s (must lie in [0, 1])")]
    InvalidTimestep(f64),
    #[error("unknown IMU preset `{0}`")]
    UnknownPreset(String),
    #[error("IMU index {index} out of range for {count} IMUs")]
    BadImuIndex { index: usize, count: usize },
    #[error("landmark index {index} out of range for {count} landmarks")]
    BadLandmark { index: usize, count: usize },
    #[error("innovation covariance is not positive definite")]
    SingularInnovation,
    #[error("covariance sub-block is singular")]
    SingularCovariance,
    #[error("covariance unhealthy: {0}")]
    UnhealthyCovariance(String),
    #[error("non-finite filter state")]
    NonFinite,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
