//! Benchmark problems: forward maps, losses, training data and analytic references.
//!
//! - [`sysid`]: fitting a neural vector field to samples of the damped linear spiral or the
//!   simple pendulum.
//! - [`control`]: steering `dx/dt = a x + b u(t)` from `x0` to `x*` with a neural controller,
//!   regularized by the control energy, and the closed-form minimum-energy solution.

use thiserror::Error;

use crate::nnet::NnetError;
use crate::ode::OdeError;

pub mod control;
pub mod sysid;

pub use control::{
    control_energy, control_forward_map, control_loss, optimal_control, optimal_energy,
    optimal_state, ControlProblem, ControllerInput,
};
pub use sysid::{
    make_observations, mse, pendulum_field, spiral_field, spiral_solution, sysid_forward_map,
    test_mse, Assembly, ObservationSet, SysIdProblem, SysIdSetup, TrueSystem,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("integration failed: {0}")]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error("infeasible observation scheme: {0}")]
    Infeasible(String),
    #[error("invalid problem parameter: {0}")]
    InvalidParameter(String),
    #[error("the closed-form control requires a != 0 (the a -> 0 limit is not implemented)")]
    DegenerateDynamics,
    #[error("no reference points are left for the test set")]
    EmptyTestSet,
}
