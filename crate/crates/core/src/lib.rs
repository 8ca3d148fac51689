//! Simulation and profile sieve maximum-likelihood estimation of dynamic
//! panel learning models with known and initially unknown heterogeneity.

// `!(x > 0.0)` is used on purpose so NaN fails validation. Index loops
// over several parallel arrays read better than zipped iterators here.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bfgs;
pub mod error;
pub mod estimator;
pub mod functionals;
pub mod harness;
pub mod kernel;
pub mod likelihood;
pub mod model;
pub mod npmle;
pub mod params;
pub mod profile;
pub mod simulate;

pub use error::{Error, Result};
