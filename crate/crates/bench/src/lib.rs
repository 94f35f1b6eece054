//! Simulation and Monte Carlo harness for the metamorphic estimators, with
//! the vehicle scenario and report generators behind the `mmhe` binary.

pub mod experiment;
pub mod reports;
pub mod scenario;
pub mod sim;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] mmhe_core::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;

impl BenchError {
    /// 2 for bad input, 3 for estimator or solver failures.
    pub fn exit_code(&self) -> i32 {
        use mmhe_core::Error as E;
        match self {
            BenchError::Config(_) | BenchError::Io(_) => 2,
            BenchError::Core(E::DimensionMismatch { .. } | E::InvalidParameter(_) | E::NotPositiveDefinite { .. } | E::Serialization(_)) => 2,
            BenchError::Core(_) => 3,
        }
    }
}
