//! Numerical toolkit for the small-mass limit of the periodic stochastic
//! variational wave equation.

pub mod coeffs;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod linalg;
pub mod noise;
pub mod parabolic;
pub mod wave;

pub use error::{Error, Result};
pub use grid::{DerivativeScheme, Field, PeriodicGrid};
