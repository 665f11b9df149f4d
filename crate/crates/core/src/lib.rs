//! Gradient-free training of neural ODEs with ensemble Kalman inversion.
//!
//! The crate is organised bottom-up:
//!
//! - [`nnet`]: a minimal MLP with a fixed, portable parameter layout.
//! - [`ode`]: Euler, RK4 and Dormand–Prince 5(4) integrators sampled on exact time grids.
//! - [`eki`]: ensemble Kalman inversion, plain and with a block-diagonal (energy-regularized)
//!   observation covariance, plus covariance schedules and ensemble growth.
//! - [`problems`]: the spiral and pendulum system-identification benchmarks and the
//!   linear minimum-energy control problem with its closed-form solution.
//! - [`gradbase`]: backpropagation through the time-unfolded network, Adam and SGD.
//!
//! Random streams come from [`rng`], which wraps a seeded ChaCha8 generator so the same seed
//! gives the same ensembles on every platform.

pub mod eki;
pub mod gradbase;
pub mod nnet;
pub mod ode;
pub mod problems;
pub mod rng;

pub use nnet::{Activation, MlpSpec, ParamVector};
