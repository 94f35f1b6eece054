//! Moving-horizon state estimation with observer-augmented (metamorphic)
//! cost weighting, plus the supporting linear algebra, Riccati, set and QP
//! machinery.

pub mod error;
pub mod linalg;
pub mod linmodel;
pub mod fir_baseline;
pub mod mhe_init;
pub mod mmhe_full;
pub mod qpsolve;
pub mod riccati;
pub mod setops;

pub use error::{Error, Result};
