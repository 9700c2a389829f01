//! Joint state and parameter estimation for stochastic dynamical systems.
//!
//! The state is tracked with an ensemble score filter (EnSF), which draws
//! posterior samples by integrating a reverse-time SDE whose score is estimated
//! from the forecast ensemble. Unknown model parameters are tracked with a
//! direct particle filter whose likelihood is evaluated on EnSF state
//! estimates. [`united::run`] couples the two; [`augenkf`] provides an
//! augmented-state EnKF baseline.

pub mod augenkf;
pub mod diffusion;
pub mod direct_filter;
pub mod ensemble;
pub mod ensf;
pub mod error;
pub mod harness;
pub mod models;
pub mod rng;
pub mod system;
pub mod united;

pub use ensemble::StateEnsemble;
pub use error::{Error, Result};
pub use rng::{SeedTree, SimRng};
pub use system::{CoordinateObservation, Dynamics, GaussianNoise, LinearObservation, Measurement, Observation, Transform};
