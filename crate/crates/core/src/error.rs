use num_complex::Complex64;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not Schur stable (spectral radius {spectral_radius})")]
    NotSchur { spectral_radius: f64 },

    #[error("pair (A, C) is not observable")]
    Unobservable,

    #[error("pole placement failed; achieved spectrum {achieved:?}")]
    PlacementFailed { achieved: Vec<Complex64> },

    #[error("{context}: matrix is singular or not positive definite (condition estimate {condition:e})")]
    Singular {
        context: &'static str,
        condition: f64,
    },

    #[error("{context}: matrix is not symmetric positive definite")]
    NotPositiveDefinite { context: &'static str },

    #[error("QP Hessian is not strictly convex (smallest eigenvalue {min_eigenvalue:e})")]
    NonConvex { min_eigenvalue: f64 },

    #[error("{context}: no convergence after {iterations} iterations (last change {residual:e})")]
    NoConvergence {
        context: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("no invariant box exists: spectral radius of |A_L| is {abs_spectral_radius} >= 1")]
    NoInvariantBox { abs_spectral_radius: f64 },

    #[error("eigenvalue computation failed")]
    EigenFailure,

    #[error("QP infeasible (certificate value b'y = {certificate_value:e})")]
    Infeasible { certificate_value: f64 },

    #[error("QP solver hit the iteration limit ({iterations}); KKT residual {kkt_residual:e}")]
    IterationLimit { iterations: usize, kkt_residual: f64 },

    #[error("horizon window has {have} of the {need} measurements required")]
    WindowNotFull { have: usize, need: usize },

    #[error("serialization: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
