//! System identification: learn `f_theta` so that `dx/dt = f_theta(x)` reproduces observed states.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ProblemError;
use crate::eki::ForwardMapOutput;
use crate::nnet::{forward_into, Activation, MlpSpec, NnetError, ParamVector, Scratch};
use crate::ode::{integrate, IntegratorConfig, Trajectory, VectorField};

/// Damped linear oscillator `dx1 = -0.05 x1 + x2`, `dx2 = -x1 - 0.05 x2`.
pub fn spiral_field(x: &[f64], _t: f64) -> [f64; 2] {
    [-0.05 * x[0] + x[1], -x[0] - 0.05 * x[1]]
}

/// Closed-form solution of the spiral from `(1, 0)`.
pub fn spiral_solution(t: f64) -> [f64; 2] {
    let decay = (-t / 20.0).exp();
    [decay * t.cos(), -decay * t.sin()]
}

/// Pendulum `x'' = -omega sin x` as the first-order system `(x, v)`.
pub fn pendulum_field(x: &[f64], _t: f64, omega: f64) -> [f64; 2] {
    [x[1], -omega * x[0].sin()]
}

/// First integral `v^2 / 2 - omega cos x` of the pendulum.
pub fn pendulum_energy(x: &[f64], omega: f64) -> f64 {
    0.5 * x[1] * x[1] - omega * x[0].cos()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrueSystem {
    Spiral,
    Pendulum { omega: f64 },
}

impl TrueSystem {
    pub fn dim(&self) -> usize {
        2
    }

    pub fn eval(&self, x: &[f64], t: f64) -> [f64; 2] {
        match *self {
            TrueSystem::Spiral => spiral_field(x, t),
            TrueSystem::Pendulum { omega } => pendulum_field(x, t, omega),
        }
    }
}

impl VectorField for TrueSystem {
    fn dim(&self) -> usize {
        TrueSystem::dim(self)
    }
    fn eval(&mut self, x: &[f64], t: f64, dx: &mut [f64]) {
        dx.copy_from_slice(&TrueSystem::eval(self, x, t));
    }
}

/// `f_theta(x)`: an MLP from state to state derivative.
pub struct NeuralField<'a> {
    spec: &'a MlpSpec,
    params: &'a [f64],
    scratch: Scratch,
}

impl<'a> NeuralField<'a> {
    pub fn new(spec: &'a MlpSpec, theta: &'a ParamVector) -> Result<Self, NnetError> {
        if theta.len() != spec.param_count() {
            return Err(NnetError::DimensionMismatch {
                what: "parameter vector",
                expected: spec.param_count(),
                actual: theta.len(),
            });
        }
        if spec.input_dim() != spec.output_dim() {
            return Err(NnetError::InvalidSpec(format!(
                "a vector field needs equal input and output widths, got {} and {}",
                spec.input_dim(),
                spec.output_dim()
            )));
        }
        Ok(Self {
            spec,
            params: theta.as_slice(),
            scratch: Scratch::new(spec),
        })
    }
}

impl VectorField for NeuralField<'_> {
    fn dim(&self) -> usize {
        self.spec.input_dim()
    }
    fn eval(&mut self, x: &[f64], _t: f64, dx: &mut [f64]) {
        forward_into(self.spec, self.params, x, &mut self.scratch, dx);
    }
}

/// `n` evenly spaced points on `[start, end]`, endpoints included.
pub fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..n)
            .map(|i| start + (end - start) * (i as f64) / ((n - 1) as f64))
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetScheme {
    pub num_subsets: usize,
    pub subset_length: usize,
}

/// Training data: runs of consecutive points taken from a reference solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    /// Sorted grid indices of the observed points.
    pub indices: Vec<usize>,
    /// `(start index, length)` of each run, sorted by start.
    pub runs: Vec<(usize, usize)>,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub reference: Trajectory,
    pub scheme: SubsetScheme,
}

impl ObservationSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Observations stacked time-major into one vector.
    pub fn stacked(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    /// Grid indices not used for training.
    pub fn test_indices(&self) -> Vec<usize> {
        let mut used = vec![false; self.reference.len()];
        self.indices.iter().for_each(|&i| used[i] = true);
        (0..self.reference.len()).filter(|&i| !used[i]).collect()
    }
}

/// Picks `num_subsets` non-overlapping runs of `subset_length` consecutive grid points.
///
/// Start indices are drawn uniformly from `0..=grid_size - subset_length` without replacement;
/// a start whose run would overlap an earlier run is drawn again, so the result always holds
/// exactly `num_subsets * subset_length` distinct points.
pub fn make_observations<R: Rng + ?Sized>(
    reference: &Trajectory,
    num_subsets: usize,
    subset_length: usize,
    rng: &mut R,
) -> Result<ObservationSet, ProblemError> {
    let grid = reference.len();
    if num_subsets == 0 || subset_length == 0 {
        return Err(ProblemError::Infeasible(
            "need at least one subset of at least one point".into(),
        ));
    }
    if num_subsets * subset_length > grid {
        return Err(ProblemError::Infeasible(format!(
            "{num_subsets} subsets of {subset_length} points do not fit in {grid} grid points"
        )));
    }
    let last_start = grid - subset_length;

    const ATTEMPTS: usize = 1000;
    let mut starts = Vec::with_capacity(num_subsets);
    'attempt: for _ in 0..ATTEMPTS {
        starts.clear();
        for _ in 0..num_subsets {
            // Rejection sampling against earlier runs equals a uniform draw among the starts
            // that are still free; enumerate them so dense packings cannot spin forever.
            let free: Vec<usize> = (0..=last_start)
                .filter(|&s| {
                    starts
                        .iter()
                        .all(|&c: &usize| s.abs_diff(c) >= subset_length)
                })
                .collect();
            if free.is_empty() {
                continue 'attempt;
            }
            starts.push(free[rng.random_range(0..free.len())]);
        }
        break;
    }
    if starts.len() != num_subsets {
        return Err(ProblemError::Infeasible(format!(
            "could not place {num_subsets} disjoint runs of {subset_length} in {grid} points"
        )));
    }
    starts.sort_unstable();

    let runs: Vec<(usize, usize)> = starts.iter().map(|&s| (s, subset_length)).collect();
    let indices: Vec<usize> = starts.iter().flat_map(|&s| s..s + subset_length).collect();
    Ok(ObservationSet {
        times: indices.iter().map(|&i| reference.times[i]).collect(),
        values: indices
            .iter()
            .map(|&i| reference.states[i].clone())
            .collect(),
        indices,
        runs,
        reference: reference.clone(),
        scheme: SubsetScheme {
            num_subsets,
            subset_length,
        },
    })
}

/// How predictions at the observation times are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assembly {
    /// One trajectory from the known initial state over the whole horizon.
    #[default]
    FullTrajectory,
    /// Each run is integrated from its own first observed point.
    MultipleShooting,
}

/// Everything needed to build a [`SysIdProblem`] except the random draw of observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SysIdSetup {
    pub system: TrueSystem,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub grid_size: usize,
    pub num_subsets: usize,
    pub subset_length: usize,
    pub net: MlpSpec,
    #[serde(default)]
    pub assembly: Assembly,
    /// Integrator that generates the reference solution.
    #[serde(default = "reference_integrator")]
    pub reference_integrator: IntegratorConfig,
}

/// Dormand–Prince at rtol 1e-9 for reference data.
pub fn reference_integrator() -> IntegratorConfig {
    IntegratorConfig::dopri(1e-9, 1e-12)
}

impl SysIdSetup {
    /// 500 points on [0, 40] from (1, 0); 10 runs of 10 points; 2 -> 10 -> 2 tanh network.
    pub fn spiral() -> Self {
        Self {
            system: TrueSystem::Spiral,
            x0: vec![1.0, 0.0],
            horizon: 40.0,
            grid_size: 500,
            num_subsets: 10,
            subset_length: 10,
            net: MlpSpec::new(vec![2, 10, 2], Activation::Tanh).expect("valid layout"),
            assembly: Assembly::FullTrajectory,
            reference_integrator: reference_integrator(),
        }
    }

    /// 200 points on [0, 20] from (pi/4, 0) with omega = 1; otherwise as [`SysIdSetup::spiral`].
    pub fn pendulum() -> Self {
        Self {
            system: TrueSystem::Pendulum { omega: 1.0 },
            x0: vec![std::f64::consts::FRAC_PI_4, 0.0],
            horizon: 20.0,
            grid_size: 200,
            ..Self::spiral()
        }
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        let n = self.system.dim();
        if self.x0.len() != n {
            return Err(ProblemError::InvalidParameter(format!(
                "x0 must have {n} entries"
            )));
        }
        if self.net.input_dim() != n || self.net.output_dim() != n {
            return Err(ProblemError::InvalidParameter(format!(
                "network must map R^{n} to R^{n}, got {:?}",
                self.net.layer_sizes()
            )));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(ProblemError::InvalidParameter(
                "horizon must be positive".into(),
            ));
        }
        if self.grid_size < 2 {
            return Err(ProblemError::InvalidParameter(
                "grid_size must be at least 2".into(),
            ));
        }
        self.reference_integrator.validate()?;
        Ok(())
    }

    pub fn reference_solution(&self) -> Result<Trajectory, ProblemError> {
        let times = linspace(0.0, self.horizon, self.grid_size);
        let mut field = self.system;
        Ok(integrate(
            &mut field,
            &self.x0,
            &times,
            &self.reference_integrator,
        )?)
    }

    pub fn build<R: Rng + ?Sized>(
        &self,
        integrator: IntegratorConfig,
        rng: &mut R,
    ) -> Result<SysIdProblem, ProblemError> {
        self.validate()?;
        integrator.validate()?;
        let reference = self.reference_solution()?;
        let observations =
            make_observations(&reference, self.num_subsets, self.subset_length, rng)?;
        Ok(SysIdProblem {
            system: self.system,
            x0: self.x0.clone(),
            horizon: self.horizon,
            observations,
            net: self.net.clone(),
            integrator,
            assembly: self.assembly,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SysIdProblem {
    pub system: TrueSystem,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub observations: ObservationSet,
    pub net: MlpSpec,
    /// Integrator used to unfold the neural ODE.
    pub integrator: IntegratorConfig,
    pub assembly: Assembly,
}

impl SysIdProblem {
    pub fn grid_size(&self) -> usize {
        self.observations.reference.len()
    }

    /// Spacing of the reference grid.
    pub fn grid_spacing(&self) -> f64 {
        self.horizon / (self.grid_size() - 1) as f64
    }

    pub fn observation_vector(&self) -> Vec<f64> {
        self.observations.stacked()
    }
}

/// Integrates an arbitrary field the way [`sysid_forward_map`] integrates `f_theta`.
pub fn predict_observations<F: VectorField + ?Sized>(
    field: &mut F,
    prob: &SysIdProblem,
) -> Result<Vec<Vec<f64>>, ProblemError> {
    let obs = &prob.observations;
    match prob.assembly {
        Assembly::FullTrajectory => {
            let t0 = obs.reference.times[0];
            let prepend = obs.times[0] != t0;
            let mut times = Vec::with_capacity(obs.len() + 1);
            if prepend {
                times.push(t0);
            }
            times.extend_from_slice(&obs.times);
            let traj = integrate(field, &prob.x0, &times, &prob.integrator)?;
            Ok(traj.states.into_iter().skip(usize::from(prepend)).collect())
        }
        Assembly::MultipleShooting => {
            let mut out = Vec::with_capacity(obs.len());
            for &(start, len) in &obs.runs {
                let times = &obs.reference.times[start..start + len];
                let x_start = &obs.reference.states[start];
                let traj = integrate(field, x_start, times, &prob.integrator)?;
                out.extend(traj.states);
            }
            Ok(out)
        }
    }
}

/// `G(theta)`: predicted states at the observation times, stacked time-major.
pub fn sysid_forward_map(
    theta: &ParamVector,
    prob: &SysIdProblem,
) -> Result<ForwardMapOutput, ProblemError> {
    let mut field = NeuralField::new(&prob.net, theta)?;
    let states = predict_observations(&mut field, prob)?;
    Ok(ForwardMapOutput::plain(
        states.into_iter().flatten().collect(),
    ))
}

/// Mean over observations of the squared Euclidean state error.
pub fn mse_of_stacked(predicted: &[f64], observed: &[f64], dim: usize) -> f64 {
    let m = observed.len() / dim;
    let sum: f64 = predicted
        .iter()
        .zip(observed)
        .map(|(p, o)| (o - p).powi(2))
        .sum();
    sum / m as f64
}

pub fn mse_from_output(out: &ForwardMapOutput, prob: &SysIdProblem) -> f64 {
    mse_of_stacked(&out.g, &prob.observation_vector(), prob.system.dim())
}

pub fn mse(theta: &ParamVector, prob: &SysIdProblem) -> Result<f64, ProblemError> {
    Ok(mse_from_output(&sysid_forward_map(theta, prob)?, prob))
}

/// The learned trajectory from `x0` sampled on the full reference grid.
pub fn predict_reference_grid(
    theta: &ParamVector,
    prob: &SysIdProblem,
) -> Result<Trajectory, ProblemError> {
    let mut field = NeuralField::new(&prob.net, theta)?;
    Ok(integrate(
        &mut field,
        &prob.x0,
        &prob.observations.reference.times,
        &prob.integrator,
    )?)
}

/// MSE on every reference-grid point that is not a training observation.
pub fn test_mse(theta: &ParamVector, prob: &SysIdProblem) -> Result<f64, ProblemError> {
    let test = prob.observations.test_indices();
    if test.is_empty() {
        return Err(ProblemError::EmptyTestSet);
    }
    let pred = predict_reference_grid(theta, prob)?;
    let reference = &prob.observations.reference;
    let sum: f64 = test
        .iter()
        .map(|&i| {
            pred.states[i]
                .iter()
                .zip(&reference.states[i])
                .map(|(p, r)| (r - p).powi(2))
                .sum::<f64>()
        })
        .sum();
    Ok(sum / test.len() as f64)
}
