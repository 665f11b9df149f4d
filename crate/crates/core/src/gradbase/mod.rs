//! Gradient-based baseline: backpropagation through time with Adam or plain SGD.
//!
//! Losses are differentiated exactly as they are computed on a fixed-step (Euler or RK4)
//! unfolding; adaptive Dormand–Prince unfoldings are rejected because accept/reject decisions
//! make the discrete map non-differentiable.

use thiserror::Error;

use crate::nnet::{MlpSpec, ParamVector};
use crate::ode::IntegratorConfig;
use crate::problems::control::ControlProblem;
use crate::problems::sysid::{Assembly, SysIdProblem};
use crate::problems::{ControllerInput, ProblemError};

mod optim;
pub mod tape;

pub use optim::{adam_step, sgd_step, AdamConfig, AdamState};
use tape::{backward_traced, forward_traced, reverse, unroll, MlpTrace, TapedField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("non-finite state after unfolding step {step}")]
    NonFinite { step: usize },
    #[error("BPTT needs a fixed-step unfolding (euler or rk4)")]
    AdaptiveUnfolding,
    #[error("parameter vector has length {actual}, expected {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// Loss value and its gradient with respect to the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub loss: f64,
    pub gradient: Vec<f64>,
}

/// A loss that can be differentiated through a fixed-step unfolding.
pub trait DifferentiableLoss {
    fn param_count(&self) -> usize;

    fn loss_and_gradient(
        &self,
        theta: &ParamVector,
        unfold: &IntegratorConfig,
    ) -> Result<LossGradient, GradError>;
}

/// Gradient of the discrete loss by reverse accumulation through every step and layer.
pub fn bptt_gradient<P: DifferentiableLoss + ?Sized>(
    theta: &ParamVector,
    problem: &P,
    unfold: &IntegratorConfig,
) -> Result<Vec<f64>, GradError> {
    Ok(problem.loss_and_gradient(theta, unfold)?.gradient)
}

fn check_dim(expected: usize, theta: &ParamVector) -> Result<(), GradError> {
    if theta.len() != expected {
        return Err(GradError::Dimension {
            expected,
            actual: theta.len(),
        });
    }
    Ok(())
}

/// `f_theta(x)` for system identification.
struct NeuralTaped<'a> {
    spec: &'a MlpSpec,
}

impl TapedField for NeuralTaped<'_> {
    fn dim(&self) -> usize {
        self.spec.input_dim()
    }

    fn forward(&self, params: &[f64], x: &[f64], _t: f64, dx: &mut [f64]) -> MlpTrace {
        let tr = forward_traced(self.spec, params, x);
        dx.copy_from_slice(tr.output());
        tr
    }

    fn backward(
        &self,
        params: &[f64],
        trace: &MlpTrace,
        f_bar: &[f64],
        grad: &mut [f64],
    ) -> Vec<f64> {
        backward_traced(self.spec, params, trace, f_bar, grad)
    }
}

impl DifferentiableLoss for SysIdProblem {
    fn param_count(&self) -> usize {
        self.net.param_count()
    }

    /// Gradient of the training MSE.
    fn loss_and_gradient(
        &self,
        theta: &ParamVector,
        unfold: &IntegratorConfig,
    ) -> Result<LossGradient, GradError> {
        check_dim(self.net.param_count(), theta)?;
        let field = NeuralTaped { spec: &self.net };
        let params = theta.as_slice();
        let obs = &self.observations;
        let m = obs.len() as f64;
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;

        // Each segment is (initial state, sample times, observation offset, whether the first
        // sample is an observation).
        let mut segments: Vec<(Vec<f64>, Vec<f64>, usize, bool)> = Vec::new();
        match self.assembly {
            Assembly::FullTrajectory => {
                let t0 = obs.reference.times[0];
                let prepend = obs.times[0] != t0;
                let mut times = Vec::with_capacity(obs.len() + 1);
                if prepend {
                    times.push(t0);
                }
                times.extend_from_slice(&obs.times);
                segments.push((self.x0.clone(), times, 0, !prepend));
            }
            Assembly::MultipleShooting => {
                let mut offset = 0;
                for &(start, len) in &obs.runs {
                    let times = obs.reference.times[start..start + len].to_vec();
                    segments.push((obs.reference.states[start].clone(), times, offset, true));
                    offset += len;
                }
            }
        }

        for (x_start, times, offset, first_is_obs) in segments {
            let tape = unroll(&field, params, &x_start, &times, unfold)?;
            let skip = usize::from(!first_is_obs);
            let mut bars = vec![vec![0.0; x_start.len()]; times.len()];
            for (i, state) in tape.states.iter().enumerate().skip(skip) {
                let target = &obs.values[offset + i - skip];
                for (c, (x, y)) in state.iter().zip(target).enumerate() {
                    let d = x - y;
                    loss += (y - x).powi(2);
                    bars[i][c] = 2.0 * d / m;
                }
            }
            reverse(&field, params, &tape, &bars, &mut grad);
        }
        Ok(LossGradient {
            loss: loss / m,
            gradient: grad,
        })
    }
}

/// `a x + b u_theta(t[, x])`.
struct ControlTaped<'a> {
    prob: &'a ControlProblem,
}

impl ControlTaped<'_> {
    fn trace(&self, params: &[f64], x: f64, t: f64) -> MlpTrace {
        match self.prob.controller_input {
            ControllerInput::Time => forward_traced(&self.prob.controller, params, &[t]),
            ControllerInput::TimeAndState => forward_traced(&self.prob.controller, params, &[t, x]),
        }
    }

    /// Backpropagates `u_bar` through the controller, returning `du/dx * u_bar`.
    fn controller_backward(
        &self,
        params: &[f64],
        trace: &MlpTrace,
        u_bar: f64,
        grad: &mut [f64],
    ) -> f64 {
        let in_bar = backward_traced(&self.prob.controller, params, trace, &[u_bar], grad);
        match self.prob.controller_input {
            ControllerInput::Time => 0.0,
            ControllerInput::TimeAndState => in_bar[1],
        }
    }
}

impl TapedField for ControlTaped<'_> {
    fn dim(&self) -> usize {
        1
    }

    fn forward(&self, params: &[f64], x: &[f64], t: f64, dx: &mut [f64]) -> MlpTrace {
        let tr = self.trace(params, x[0], t);
        dx[0] = self.prob.a * x[0] + self.prob.b * tr.output()[0];
        tr
    }

    fn backward(
        &self,
        params: &[f64],
        trace: &MlpTrace,
        f_bar: &[f64],
        grad: &mut [f64],
    ) -> Vec<f64> {
        let through_u = self.controller_backward(params, trace, self.prob.b * f_bar[0], grad);
        vec![self.prob.a * f_bar[0] + through_u]
    }
}

impl DifferentiableLoss for ControlProblem {
    fn param_count(&self) -> usize {
        self.controller.param_count()
    }

    /// Gradient of `1/2 (x(T) - x*)^2 / Gamma + mu / (2 Gamma') E_T` with the trapezoid energy.
    fn loss_and_gradient(
        &self,
        theta: &ParamVector,
        unfold: &IntegratorConfig,
    ) -> Result<LossGradient, GradError> {
        self.validate()?;
        check_dim(self.controller.param_count(), theta)?;
        let field = ControlTaped { prob: self };
        let params = theta.as_slice();
        let times = self.quadrature_times();
        let weights = self.quadrature_weights();
        let tape = unroll(&field, params, &[self.x0], &times, unfold)?;
        let mut grad = vec![0.0; params.len()];
        let mut bars = vec![vec![0.0]; times.len()];

        let energy_scale = self.mu / (2.0 * self.gamma_prime);
        let mut energy = 0.0;
        for (k, (&t, state)) in times.iter().zip(&tape.states).enumerate() {
            let tr = field.trace(params, state[0], t);
            let u = tr.output()[0];
            energy += weights[k] * u * u;
            let u_bar = energy_scale * 2.0 * weights[k] * u;
            bars[k][0] += field.controller_backward(params, &tr, u_bar, &mut grad);
        }
        let x_t = tape.states.last().expect("non-empty")[0];
        let miss = x_t - self.x_star;
        *bars.last_mut().expect("non-empty") = vec![bars[times.len() - 1][0] + miss / self.gamma];
        reverse(&field, params, &tape, &bars, &mut grad);

        let loss = 0.5 * miss * miss / self.gamma + energy_scale * energy;
        Ok(LossGradient {
            loss,
            gradient: grad,
        })
    }
}
