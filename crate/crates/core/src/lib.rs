//! Simulation and verification toolkit for reflected mean-field particle
//! systems driven by spatially correlated noise.
//!
//! The crate simulates the `N x M` particle system on a grid of columns, its
//! McKean–Vlasov limit, and the fluctuation field between the two, and
//! provides the analysis pieces (test-function dictionary, quadratic
//! variations, covariance estimates, Galerkin Langevin system) needed to check
//! convergence rates and the central limit theorem numerically.

pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod fluctuation;
pub mod fokker_planck;
pub mod langevin;
pub mod measures;
pub mod model;
pub mod noise_field;
pub mod quadrature;
pub mod rng;
pub mod stats;
pub mod test_space;
pub mod transport;

pub use error::{Error, Result};
