//! Linear stability of stochastic optimizers near a minimum, and the
//! coherence of per-example curvature that controls it.

pub mod dynamics;
pub mod error;
pub mod quadratic;
pub mod relu2;
pub mod rng;
pub mod spectra;
pub mod sweep;

pub use error::{Error, Result};
