//! Minimum-energy control of `dx/dt = a x + b u(t)` with a neural controller `u_theta`.
//!
//! The learned controller is scored through the extended forward map
//! `F(theta) = (x(T; theta), sqrt(E_T[u_theta]))` with target `(x*, 0)`, where
//! `E_T[u] = int_0^T u(t)^2 dt` is approximated by the trapezoid rule on `K + 1` points.

use serde::{Deserialize, Serialize};

use super::ProblemError;
use crate::eki::ForwardMapOutput;
use crate::nnet::{forward_into, Activation, MlpSpec, ParamVector, Scratch};
use crate::ode::{integrate, IntegratorConfig, VectorField};

/// What the controller network sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerInput {
    /// `u_theta(t)`.
    #[default]
    Time,
    /// `u_theta(t, x)`.
    TimeAndState,
}

impl ControllerInput {
    pub fn width(self) -> usize {
        match self {
            ControllerInput::Time => 1,
            ControllerInput::TimeAndState => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlProblem {
    pub a: f64,
    pub b: f64,
    pub x0: f64,
    pub x_star: f64,
    pub horizon: f64,
    /// Energy regularization weight.
    pub mu: f64,
    /// Variance on the terminal-state channel.
    pub gamma: f64,
    /// Variance on the energy channel (before division by `mu`).
    pub gamma_prime: f64,
    pub controller: MlpSpec,
    #[serde(default)]
    pub controller_input: ControllerInput,
    /// Number of trapezoid intervals `K`.
    #[serde(default = "default_quadrature")]
    pub quadrature_intervals: usize,
    #[serde(default)]
    pub integrator: IntegratorConfig,
}

fn default_quadrature() -> usize {
    100
}

impl ControlProblem {
    /// `x0 = 0`, `T = a = b = x* = 1`, `Gamma = 0.3`, `Gamma' = 0.01`, 1 -> 5 -> 5 -> 5 -> 1 ELU
    /// controller driven by time only.
    pub fn linear_default(mu: f64) -> Self {
        Self {
            a: 1.0,
            b: 1.0,
            x0: 0.0,
            x_star: 1.0,
            horizon: 1.0,
            mu,
            gamma: 0.3,
            gamma_prime: 0.01,
            controller: MlpSpec::new(vec![1, 5, 5, 5, 1], Activation::Elu).expect("valid layout"),
            controller_input: ControllerInput::Time,
            quadrature_intervals: default_quadrature(),
            integrator: IntegratorConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        let bad = |m: String| Err(ProblemError::InvalidParameter(m));
        if self.b == 0.0 || !self.b.is_finite() {
            return bad("b must be non-zero".into());
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return bad("horizon must be positive".into());
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return bad("mu must be non-negative".into());
        }
        if !(self.gamma > 0.0 && self.gamma_prime > 0.0) {
            return bad("gamma and gamma_prime must be positive".into());
        }
        if self.quadrature_intervals == 0 {
            return bad("quadrature_intervals must be at least 1".into());
        }
        if self.controller.input_dim() != self.controller_input.width()
            || self.controller.output_dim() != 1
        {
            return bad(format!(
                "controller must map R^{} to R, got {:?}",
                self.controller_input.width(),
                self.controller.layer_sizes()
            ));
        }
        self.integrator.validate()?;
        Ok(())
    }

    /// Quadrature nodes `t_k = k T / K`, `k = 0..=K`.
    pub fn quadrature_times(&self) -> Vec<f64> {
        let k = self.quadrature_intervals;
        (0..=k)
            .map(|i| self.horizon * i as f64 / k as f64)
            .collect()
    }

    /// Trapezoid weights matching [`ControlProblem::quadrature_times`].
    pub fn quadrature_weights(&self) -> Vec<f64> {
        let k = self.quadrature_intervals;
        let dt = self.horizon / k as f64;
        (0..=k)
            .map(|i| if i == 0 || i == k { 0.5 * dt } else { dt })
            .collect()
    }

    pub fn optimal_control(&self, t: f64) -> Result<f64, ProblemError> {
        optimal_control(t, self.a, self.b, self.x0, self.x_star, self.horizon)
    }

    pub fn optimal_state(&self, t: f64) -> Result<f64, ProblemError> {
        optimal_state(t, self.a, self.b, self.x0, self.x_star, self.horizon)
    }

    pub fn optimal_energy(&self) -> Result<f64, ProblemError> {
        optimal_energy(self.a, self.b, self.x0, self.x_star, self.horizon)
    }

    /// Copy with `Gamma = Gamma' = 1`, the loss minimized by the gradient baseline.
    pub fn with_unit_covariances(&self) -> Self {
        Self {
            gamma: 1.0,
            gamma_prime: 1.0,
            ..self.clone()
        }
    }
}

fn require_nondegenerate(a: f64, b: f64) -> Result<(), ProblemError> {
    if a == 0.0 {
        return Err(ProblemError::DegenerateDynamics);
    }
    if b == 0.0 {
        return Err(ProblemError::InvalidParameter("b must be non-zero".into()));
    }
    Ok(())
}

/// Minimum-energy control `u*(t) = a e^{-a t} (x* - x0 e^{a T}) / (b sinh(a T))`.
pub fn optimal_control(
    t: f64,
    a: f64,
    b: f64,
    x0: f64,
    x_star: f64,
    horizon: f64,
) -> Result<f64, ProblemError> {
    require_nondegenerate(a, b)?;
    Ok(a * (-a * t).exp() * (x_star - x0 * (a * horizon).exp()) / (b * (a * horizon).sinh()))
}

/// State under `u*`: `x0 e^{a t} + sinh(a t) / sinh(a T) (x* - x0 e^{a T})`.
pub fn optimal_state(
    t: f64,
    a: f64,
    b: f64,
    x0: f64,
    x_star: f64,
    horizon: f64,
) -> Result<f64, ProblemError> {
    require_nondegenerate(a, b)?;
    Ok(x0 * (a * t).exp()
        + (a * t).sinh() / (a * horizon).sinh() * (x_star - x0 * (a * horizon).exp()))
}

/// `E_T[u*] = a (1 - e^{-2 a T}) (x* - x0 e^{a T})^2 / (2 b^2 sinh^2(a T))`.
pub fn optimal_energy(
    a: f64,
    b: f64,
    x0: f64,
    x_star: f64,
    horizon: f64,
) -> Result<f64, ProblemError> {
    require_nondegenerate(a, b)?;
    let gap = x_star - x0 * (a * horizon).exp();
    let s = (a * horizon).sinh();
    Ok(a * (1.0 - (-2.0 * a * horizon).exp()) * gap * gap / (2.0 * b * b * s * s))
}

/// Evaluates `u_theta` with reusable buffers.
pub struct Controller<'a> {
    spec: &'a MlpSpec,
    params: &'a [f64],
    input: ControllerInput,
    scratch: Scratch,
    buf: [f64; 2],
}

impl<'a> Controller<'a> {
    pub fn new(prob: &'a ControlProblem, theta: &'a ParamVector) -> Result<Self, ProblemError> {
        prob.validate()?;
        if theta.len() != prob.controller.param_count() {
            return Err(ProblemError::InvalidParameter(format!(
                "controller has {} parameters, got {}",
                prob.controller.param_count(),
                theta.len()
            )));
        }
        Ok(Self {
            spec: &prob.controller,
            params: theta.as_slice(),
            input: prob.controller_input,
            scratch: Scratch::new(&prob.controller),
            buf: [0.0; 2],
        })
    }

    pub fn eval(&mut self, t: f64, x: f64) -> f64 {
        let mut out = [0.0];
        let inp = match self.input {
            ControllerInput::Time => {
                self.buf[0] = t;
                &self.buf[..1]
            }
            ControllerInput::TimeAndState => {
                self.buf = [t, x];
                &self.buf[..2]
            }
        };
        forward_into(self.spec, self.params, inp, &mut self.scratch, &mut out);
        out[0]
    }
}

/// `dx/dt = a x + b u(t, x)`.
pub struct ControlledLinear<U> {
    pub a: f64,
    pub b: f64,
    pub control: U,
}

impl<U: FnMut(f64, f64) -> f64> VectorField for ControlledLinear<U> {
    fn dim(&self) -> usize {
        1
    }
    fn eval(&mut self, x: &[f64], t: f64, dx: &mut [f64]) {
        dx[0] = self.a * x[0] + self.b * (self.control)(t, x[0]);
    }
}

/// States and controls on the quadrature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlRollout {
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    pub controls: Vec<f64>,
}

impl ControlRollout {
    pub fn terminal_state(&self) -> f64 {
        *self.states.last().expect("non-empty grid")
    }
}

pub fn trapezoid_energy(controls: &[f64], weights: &[f64]) -> f64 {
    controls.iter().zip(weights).map(|(u, w)| w * u * u).sum()
}

/// Integrates the controlled system over the quadrature grid.
pub fn control_rollout(
    theta: &ParamVector,
    prob: &ControlProblem,
) -> Result<ControlRollout, ProblemError> {
    let mut ctrl = Controller::new(prob, theta)?;
    let times = prob.quadrature_times();
    let traj = {
        let mut field = ControlledLinear {
            a: prob.a,
            b: prob.b,
            control: |t: f64, x: f64| ctrl.eval(t, x),
        };
        integrate(&mut field, &[prob.x0], &times, &prob.integrator)?
    };
    let states: Vec<f64> = traj.states.iter().map(|s| s[0]).collect();
    let controls = times
        .iter()
        .zip(&states)
        .map(|(&t, &x)| ctrl.eval(t, x))
        .collect();
    Ok(ControlRollout {
        times,
        states,
        controls,
    })
}

/// Trapezoid approximation of `E_T[u_theta]` on `K + 1` points.
pub fn control_energy(theta: &ParamVector, prob: &ControlProblem) -> Result<f64, ProblemError> {
    let controls = match prob.controller_input {
        ControllerInput::Time => {
            let mut ctrl = Controller::new(prob, theta)?;
            prob.quadrature_times()
                .iter()
                .map(|&t| ctrl.eval(t, 0.0))
                .collect()
        }
        ControllerInput::TimeAndState => control_rollout(theta, prob)?.controls,
    };
    Ok(trapezoid_energy(&controls, &prob.quadrature_weights()))
}

/// `F(theta) = (x(T; theta), sqrt(E_T[u_theta]))`.
pub fn control_forward_map(
    theta: &ParamVector,
    prob: &ControlProblem,
) -> Result<ForwardMapOutput, ProblemError> {
    let rollout = control_rollout(theta, prob)?;
    let energy = trapezoid_energy(&rollout.controls, &prob.quadrature_weights());
    Ok(ForwardMapOutput::regularized(
        vec![rollout.terminal_state()],
        energy.sqrt(),
    ))
}

/// `1/2 (x(T) - x*)^2 / Gamma + mu / (2 Gamma') E_T` from a forward-map output, with the
/// covariances passed explicitly so callers can apply a schedule to `Gamma`.
pub fn control_loss_from_output(out: &ForwardMapOutput, prob: &ControlProblem, gamma: f64) -> f64 {
    let miss = out.g[0] - prob.x_star;
    let energy = out.h.unwrap_or(0.0).powi(2);
    0.5 * miss * miss / gamma + prob.mu / (2.0 * prob.gamma_prime) * energy
}

pub fn control_loss(theta: &ParamVector, prob: &ControlProblem) -> Result<f64, ProblemError> {
    Ok(control_loss_from_output(
        &control_forward_map(theta, prob)?,
        prob,
        prob.gamma,
    ))
}

/// Mean of `(u_theta(t_k) - u*(t_k))^2` over the quadrature nodes.
pub fn control_mse_vs_optimal(
    theta: &ParamVector,
    prob: &ControlProblem,
) -> Result<f64, ProblemError> {
    let rollout = control_rollout(theta, prob)?;
    let mut sum = 0.0;
    for (&t, &u) in rollout.times.iter().zip(&rollout.controls) {
        sum += (u - prob.optimal_control(t)?).powi(2);
    }
    Ok(sum / rollout.times.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::unflatten;

    const E: f64 = std::f64::consts::E;

    #[test]
    fn analytic_oracle_values() {
        let p = ControlProblem::linear_default(0.001);
        assert!((p.optimal_energy().unwrap() - 2.0 / (E * E - 1.0)).abs() < 1e-15);
        assert!((p.optimal_energy().unwrap() - 0.313).abs() < 5e-4);
        assert!((p.optimal_control(0.0).unwrap() - 1.0 / 1f64.sinh()).abs() < 1e-15);
        assert!((p.optimal_control(0.0).unwrap() - 0.850918).abs() < 1e-6);
        assert!((p.optimal_state(1.0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(p.optimal_state(0.0).unwrap(), 0.0);
        assert_eq!(
            optimal_energy(0.0, 1.0, 0.0, 1.0, 1.0),
            Err(ProblemError::DegenerateDynamics)
        );
        assert!(optimal_control(0.5, 0.0, 1.0, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn optimal_energy_matches_quadrature_of_optimal_control() {
        // Non-default parameters exercise the x0 term.
        let (a, b, x0, xs, t) = (-0.7, 2.0, 0.4, -1.3, 2.5);
        let n = 20_000;
        let h = t / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let u = optimal_control(i as f64 * h, a, b, x0, xs, t).unwrap();
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            acc += w * h * u * u;
        }
        let exact = optimal_energy(a, b, x0, xs, t).unwrap();
        assert!((acc - exact).abs() < 1e-8 * exact.max(1.0));
        assert!((optimal_state(t, a, b, x0, xs, t).unwrap() - xs).abs() < 1e-12);
    }

    fn constant_controller(c: f64) -> (ControlProblem, ParamVector) {
        let mut p = ControlProblem::linear_default(0.001);
        p.controller = MlpSpec::new(vec![1, 1], Activation::Elu).unwrap();
        (p, vec![0.0, c].into())
    }

    #[test]
    fn energy_examples() {
        let p = ControlProblem::linear_default(0.001);
        let zero = ParamVector::zeros(p.controller.param_count());
        assert_eq!(control_energy(&zero, &p).unwrap(), 0.0);

        let (p, theta) = constant_controller(0.7);
        assert!((control_energy(&theta, &p).unwrap() - 0.49).abs() < 1e-15);

        let p = ControlProblem::linear_default(0.001);
        let controls: Vec<f64> = p
            .quadrature_times()
            .iter()
            .map(|&t| (-t).exp() / 1f64.sinh())
            .collect();
        let approx = trapezoid_energy(&controls, &p.quadrature_weights());
        assert!((approx - 2.0 / (E * E - 1.0)).abs() < 1e-4);
    }

    #[test]
    fn forward_map_and_loss_for_zero_controller() {
        let p = ControlProblem::linear_default(0.001);
        let zero = ParamVector::zeros(p.controller.param_count());
        let out = control_forward_map(&zero, &p).unwrap();
        assert_eq!(out, ForwardMapOutput::regularized(vec![0.0], 0.0));

        let unit = ControlProblem {
            mu: 0.0,
            ..p.with_unit_covariances()
        };
        assert_eq!(control_loss(&zero, &unit).unwrap(), 0.5);
        assert!((control_loss(&zero, &p).unwrap() - 0.5 / 0.3).abs() < 1e-15);
    }

    #[test]
    fn optimal_control_through_the_dynamics_hits_the_target() {
        let p = ControlProblem::linear_default(0.0);
        let mut field = ControlledLinear {
            a: 1.0,
            b: 1.0,
            control: |t: f64, _x: f64| (-t).exp() / 1f64.sinh(),
        };
        let times = p.quadrature_times();
        let traj = integrate(
            &mut field,
            &[0.0],
            &times,
            &IntegratorConfig::dopri(1e-9, 1e-12),
        )
        .unwrap();
        for (t, x) in times.iter().zip(&traj.states) {
            assert!((x[0] - p.optimal_state(*t).unwrap()).abs() < 1e-6);
        }
        assert!((traj.last_state()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn state_feedback_controller_uses_rollout() {
        let mut p = ControlProblem::linear_default(0.001);
        p.controller_input = ControllerInput::TimeAndState;
        p.controller = MlpSpec::new(vec![2, 1], Activation::Elu).unwrap();
        // u = x + 0.5; from x0 = 0: dx/dt = 2x + 0.5 -> x = (e^{2t} - 1) / 4.
        let theta: ParamVector = vec![0.0, 1.0, 0.5].into();
        let layers = unflatten(&p.controller, &theta).unwrap();
        assert_eq!(layers[0].weights, vec![0.0, 1.0]);
        p.integrator = IntegratorConfig::dopri(1e-10, 1e-12);
        let r = control_rollout(&theta, &p).unwrap();
        assert!((r.terminal_state() - (E * E - 1.0) / 4.0).abs() < 1e-8);
        assert!((r.controls[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        let mut p = ControlProblem::linear_default(0.001);
        p.b = 0.0;
        assert!(p.validate().is_err());
        let mut p = ControlProblem::linear_default(0.001);
        p.controller_input = ControllerInput::TimeAndState;
        assert!(p.validate().is_err());
    }
}
