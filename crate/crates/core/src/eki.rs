//! Ensemble Kalman inversion.
//!
//! Each epoch moves every member along the ensemble approximation of the preconditioned
//! gradient flow
//!
//! ```text
//! theta_j <- theta_j - h * C^{theta F} * Sigma^{-1} * (F(theta_j) - z)
//! ```
//!
//! where `C^{theta F}` is the empirical (1/J normalized) cross-covariance between parameters
//! and forward-map outputs. For system identification `F = G`, `z = y` and `Sigma = gamma * I`.
//! For control problems the forward map carries an extra energy channel
//! `H(theta) = sqrt(E_T[u_theta])` with target 0 and `Sigma = diag(Gamma * I, Gamma' / mu)`.
//!
//! Updates are written as `-h/J * sum_k (theta_k - mean) * <F_k - F_mean, W (F_j - z)>`, which
//! never materializes the `N x d` covariance; [`cross_covariance`] builds it explicitly for
//! inspection and tests.
//!
//! [`UpdateRule::Kalman`] replaces the explicit-Euler factor `h/J` by the `J x J` solve
//! `(K + J/h I)^{-1}` with `K_kl = <F_k - F_mean, W (F_l - F_mean)>`. This is the discrete
//! iteration `theta_j += C^{theta F} (C^{FF} + Sigma / h)^{-1} (z - F_j)` written in ensemble
//! coordinates; it agrees with the Euler step to first order in `h` and stays bounded when the
//! noise scale is driven towards zero by a schedule.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nnet::{mlp_init, MlpSpec, ParamVector};
use crate::rng::EkiRng;

/// Loss assigned to members whose forward map could not be evaluated.
pub const FAILED_MEMBER_LOSS: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EkiError {
    #[error("ensemble is empty")]
    Empty,
    #[error("member {index} has {actual} parameters, expected {expected}")]
    MemberDimension {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("got {outputs} forward-map outputs for {members} members")]
    OutputCount { members: usize, outputs: usize },
    #[error("output {index} has length {actual}, expected {expected}")]
    OutputDimension {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("output {index} is missing the regularization channel")]
    MissingEnergyChannel { index: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Output of a forward map: stacked predictions and, for regularized problems, the energy channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardMapOutput {
    pub g: Vec<f64>,
    pub h: Option<f64>,
}

impl ForwardMapOutput {
    pub fn plain(g: Vec<f64>) -> Self {
        Self { g, h: None }
    }

    pub fn regularized(g: Vec<f64>, h: f64) -> Self {
        Self { g, h: Some(h) }
    }

    /// `(g, h)` as one vector.
    pub fn stacked(&self) -> Vec<f64> {
        let mut v = self.g.clone();
        v.extend(self.h);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExpansionSource {
    /// Fresh draws from the network initializer.
    Fresh,
    /// Current ensemble mean plus `scale` times a fresh initializer draw.
    PerturbMean { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionRecord {
    pub epoch: usize,
    pub count: usize,
    pub source: ExpansionSource,
}

/// Members flagged by the most recent update.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepFlags {
    /// Members whose forward evaluation failed; they did not move and did not contribute.
    pub frozen: Vec<usize>,
    /// Members whose update was non-finite and was rolled back.
    pub reset: Vec<usize>,
}

/// The EKI state: `J` parameter vectors of equal length, the epoch counter and the random
/// stream used when the ensemble grows.
#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<ParamVector>,
    epoch: usize,
    rng: EkiRng,
    expansions: Vec<ExpansionRecord>,
    flags: StepFlags,
}

impl Ensemble {
    pub fn new(members: Vec<ParamVector>, rng: EkiRng) -> Result<Self, EkiError> {
        let first = members.first().ok_or(EkiError::Empty)?;
        let n = first.len();
        if let Some((index, m)) = members.iter().enumerate().find(|(_, m)| m.len() != n) {
            return Err(EkiError::MemberDimension {
                index,
                expected: n,
                actual: m.len(),
            });
        }
        Ok(Self {
            members,
            epoch: 0,
            rng,
            expansions: Vec::new(),
            flags: StepFlags::default(),
        })
    }

    /// `size` members drawn with [`mlp_init`] from `init_rng`; `expansion_rng` is kept for growth.
    pub fn initialize<R: Rng + ?Sized>(
        spec: &MlpSpec,
        size: usize,
        init_rng: &mut R,
        expansion_rng: EkiRng,
    ) -> Result<Self, EkiError> {
        let members = (0..size).map(|_| mlp_init(spec, init_rng)).collect();
        Self::new(members, expansion_rng)
    }

    pub fn members(&self) -> &[ParamVector] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.members[0].len()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn expansions(&self) -> &[ExpansionRecord] {
        &self.expansions
    }

    pub fn flags(&self) -> &StepFlags {
        &self.flags
    }

    pub fn mean(&self) -> ParamVector {
        ensemble_mean(&self.members)
    }
}

/// Arithmetic mean of parameter vectors, summed in member order.
pub fn ensemble_mean(members: &[ParamVector]) -> ParamVector {
    let Some(first) = members.first() else {
        return ParamVector::default();
    };
    let mut acc = vec![0.0; first.len()];
    for m in members {
        for (a, v) in acc.iter_mut().zip(m.as_slice()) {
            *a += v;
        }
    }
    let j = members.len() as f64;
    acc.iter_mut().for_each(|a| *a /= j);
    acc.into()
}

/// Mean of forward-map outputs; the energy channel is averaged when every output carries it.
pub fn output_mean(outputs: &[ForwardMapOutput]) -> Result<ForwardMapOutput, EkiError> {
    let first = outputs.first().ok_or(EkiError::Empty)?;
    let d = first.g.len();
    let mut g = vec![0.0; d];
    let mut h = first.h.map(|_| 0.0);
    for (index, o) in outputs.iter().enumerate() {
        if o.g.len() != d {
            return Err(EkiError::OutputDimension {
                index,
                expected: d,
                actual: o.g.len(),
            });
        }
        for (a, v) in g.iter_mut().zip(&o.g) {
            *a += v;
        }
        match (&mut h, o.h) {
            (Some(acc), Some(v)) => *acc += v,
            (None, None) => {}
            _ => return Err(EkiError::MissingEnergyChannel { index }),
        }
    }
    let j = outputs.len() as f64;
    g.iter_mut().for_each(|a| *a /= j);
    Ok(ForwardMapOutput {
        g,
        h: h.map(|v| v / j),
    })
}

/// Empirical cross-covariance `(1/J) sum_j (theta_j - mean) (F_j - F_mean)^T`, shape
/// `N x dim(F)` where `F` includes the energy channel when present.
pub fn cross_covariance(
    members: &[ParamVector],
    outputs: &[ForwardMapOutput],
) -> Result<DMatrix<f64>, EkiError> {
    if members.len() != outputs.len() {
        return Err(EkiError::OutputCount {
            members: members.len(),
            outputs: outputs.len(),
        });
    }
    let theta_bar = ensemble_mean(members);
    let f_bar = output_mean(outputs)?.stacked();
    let n = theta_bar.len();
    let d = f_bar.len();
    let mut c = DMatrix::zeros(n, d);
    for (m, o) in members.iter().zip(outputs) {
        let f = o.stacked();
        for a in 0..n {
            let dt = m[a] - theta_bar[a];
            for b in 0..d {
                c[(a, b)] += dt * (f[b] - f_bar[b]);
            }
        }
    }
    Ok(c / members.len() as f64)
}

/// Decaying observation-noise scale `gamma_m = gamma0 * exp(-alpha * m')`, where `m'` is the
/// last multiple of `period` not exceeding `m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceSchedule {
    pub gamma0: f64,
    pub alpha: f64,
    #[serde(default = "default_period")]
    pub period: usize,
    #[serde(default = "default_true")]
    pub enabled: bool,
}

fn default_period() -> usize {
    2
}

fn default_true() -> bool {
    true
}

impl CovarianceSchedule {
    pub fn gamma_at(&self, epoch: usize) -> f64 {
        gamma_at(self, epoch)
    }
}

pub fn gamma_at(schedule: &CovarianceSchedule, epoch: usize) -> f64 {
    if !schedule.enabled {
        return schedule.gamma0;
    }
    let period = schedule.period.max(1);
    let m = (epoch / period) * period;
    schedule.gamma0 * (-schedule.alpha * m as f64).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleChange {
    pub from_epoch: usize,
    pub value: f64,
}

/// Step function: `initial` until the first change, then the value of the latest change whose
/// `from_epoch` is `<=` the current epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseSchedule {
    pub initial: f64,
    #[serde(default)]
    pub changes: Vec<ScheduleChange>,
}

impl PiecewiseSchedule {
    pub fn value_at(&self, epoch: usize) -> f64 {
        self.changes
            .iter()
            .filter(|c| c.from_epoch <= epoch)
            .max_by_key(|c| c.from_epoch)
            .map_or(self.initial, |c| c.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GammaSchedule {
    Exponential(CovarianceSchedule),
    Piecewise(PiecewiseSchedule),
}

impl GammaSchedule {
    pub fn value_at(&self, epoch: usize) -> f64 {
        match self {
            GammaSchedule::Exponential(s) => s.gamma_at(epoch),
            GammaSchedule::Piecewise(p) => p.value_at(epoch),
        }
    }

    pub fn validate(&self) -> Result<(), EkiError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        match self {
            GammaSchedule::Exponential(s) => {
                if !ok(s.gamma0) || !(s.alpha.is_finite() && s.alpha >= 0.0) || s.period == 0 {
                    return Err(EkiError::InvalidParameter(format!(
                        "exponential schedule needs gamma0 > 0, alpha >= 0, period >= 1 (got {s:?})"
                    )));
                }
            }
            GammaSchedule::Piecewise(p) => {
                if !ok(p.initial) || p.changes.iter().any(|c| !ok(c.value)) {
                    return Err(EkiError::InvalidParameter(
                        "piecewise schedule values must be positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Block-diagonal observation covariance `diag(gamma * I, gamma_prime / mu)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockCovariance {
    pub gamma: f64,
    pub gamma_prime: f64,
    pub mu: f64,
}

impl BlockCovariance {
    pub fn validate(&self) -> Result<(), EkiError> {
        if !(self.gamma > 0.0 && self.gamma_prime > 0.0 && self.mu > 0.0)
            || !(self.gamma.is_finite() && self.gamma_prime.is_finite() && self.mu.is_finite())
        {
            return Err(EkiError::InvalidParameter(format!(
                "block covariance needs gamma, gamma' and mu > 0 (got {self:?})"
            )));
        }
        Ok(())
    }

    /// Weight applied to the energy-channel residual, `mu / gamma'`.
    pub fn energy_weight(&self) -> f64 {
        self.mu / self.gamma_prime
    }
}

/// Time discretization of the ensemble flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    ExplicitEuler,
    #[default]
    Kalman,
}

/// Observation-noise covariance of the inverse problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    /// `gamma * I` on the data block; outputs carry no energy channel.
    Isotropic { gamma: f64 },
    /// Data block plus energy channel, see [`BlockCovariance`].
    Block(BlockCovariance),
}

/// One epoch under either rule and either noise model. `None` outputs freeze their member.
pub fn eki_update(
    ens: &Ensemble,
    outputs: &[Option<&ForwardMapOutput>],
    y: &[f64],
    noise: &NoiseModel,
    rule: UpdateRule,
    step: f64,
) -> Result<Ensemble, EkiError> {
    check_positive("step", step)?;
    match noise {
        NoiseModel::Isotropic { gamma } => {
            check_positive("gamma", *gamma)?;
            check_outputs(ens, outputs, y.len(), false)?;
            let stacked: Vec<Option<Vec<f64>>> =
                outputs.iter().map(|o| o.map(|o| o.g.clone())).collect();
            let weights = vec![1.0 / gamma; y.len()];
            Ok(flow_update(ens, &stacked, y, &weights, step, rule))
        }
        NoiseModel::Block(cov) => {
            cov.validate()?;
            check_outputs(ens, outputs, y.len(), true)?;
            let stacked: Vec<Option<Vec<f64>>> = outputs
                .iter()
                .map(|o| o.map(ForwardMapOutput::stacked))
                .collect();
            let mut z = y.to_vec();
            z.push(0.0);
            let mut weights = vec![1.0 / cov.gamma; y.len()];
            weights.push(cov.energy_weight());
            Ok(flow_update(ens, &stacked, &z, &weights, step, rule))
        }
    }
}

/// One explicit-Euler step of the EKI flow with `Gamma = gamma * I`.
pub fn eki_step(
    ens: &Ensemble,
    outputs: &[ForwardMapOutput],
    y: &[f64],
    gamma: f64,
    step: f64,
) -> Result<Ensemble, EkiError> {
    let wrapped: Vec<Option<&ForwardMapOutput>> = outputs.iter().map(Some).collect();
    eki_step_partial(ens, &wrapped, y, gamma, step)
}

/// [`eki_step`] where `None` marks a member whose forward evaluation failed.
pub fn eki_step_partial(
    ens: &Ensemble,
    outputs: &[Option<&ForwardMapOutput>],
    y: &[f64],
    gamma: f64,
    step: f64,
) -> Result<Ensemble, EkiError> {
    eki_update(
        ens,
        outputs,
        y,
        &NoiseModel::Isotropic { gamma },
        UpdateRule::ExplicitEuler,
        step,
    )
}

/// One explicit-Euler step of the regularized flow with target `z = (y, 0)`.
pub fn eki_step_regularized(
    ens: &Ensemble,
    outputs: &[ForwardMapOutput],
    y: &[f64],
    cov: &BlockCovariance,
    step: f64,
) -> Result<Ensemble, EkiError> {
    let wrapped: Vec<Option<&ForwardMapOutput>> = outputs.iter().map(Some).collect();
    eki_step_regularized_partial(ens, &wrapped, y, cov, step)
}

pub fn eki_step_regularized_partial(
    ens: &Ensemble,
    outputs: &[Option<&ForwardMapOutput>],
    y: &[f64],
    cov: &BlockCovariance,
    step: f64,
) -> Result<Ensemble, EkiError> {
    eki_update(
        ens,
        outputs,
        y,
        &NoiseModel::Block(*cov),
        UpdateRule::ExplicitEuler,
        step,
    )
}

fn check_positive(name: &str, v: f64) -> Result<(), EkiError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(EkiError::InvalidParameter(format!(
            "{name} must be positive and finite, got {v}"
        )))
    }
}

fn check_outputs(
    ens: &Ensemble,
    outputs: &[Option<&ForwardMapOutput>],
    d: usize,
    need_energy: bool,
) -> Result<(), EkiError> {
    if outputs.len() != ens.len() {
        return Err(EkiError::OutputCount {
            members: ens.len(),
            outputs: outputs.len(),
        });
    }
    for (index, o) in outputs.iter().enumerate() {
        let Some(o) = o else { continue };
        if o.g.len() != d {
            return Err(EkiError::OutputDimension {
                index,
                expected: d,
                actual: o.g.len(),
            });
        }
        if need_energy && o.h.is_none() {
            return Err(EkiError::MissingEnergyChannel { index });
        }
    }
    Ok(())
}

/// Shared update for both forms. `weights` is the diagonal of the inverse covariance.
fn flow_update(
    ens: &Ensemble,
    stacked: &[Option<Vec<f64>>],
    z: &[f64],
    weights: &[f64],
    step: f64,
    rule: UpdateRule,
) -> Ensemble {
    let mut next = ens.clone();
    next.epoch += 1;
    next.flags = StepFlags::default();

    let active: Vec<usize> = (0..ens.len()).filter(|&j| stacked[j].is_some()).collect();
    next.flags.frozen = (0..ens.len()).filter(|&j| stacked[j].is_none()).collect();
    if active.len() < 2 {
        return next;
    }

    let n = ens.dim();
    let d = z.len();
    let ja = active.len() as f64;
    let outs: Vec<&[f64]> = active
        .iter()
        .map(|&j| stacked[j].as_deref().unwrap())
        .collect();
    let params: Vec<&[f64]> = active.iter().map(|&j| ens.members[j].as_slice()).collect();

    let mut theta_bar = vec![0.0; n];
    let mut f_bar = vec![0.0; d];
    for (p, f) in params.iter().zip(&outs) {
        theta_bar.iter_mut().zip(*p).for_each(|(a, v)| *a += v);
        f_bar.iter_mut().zip(*f).for_each(|(a, v)| *a += v);
    }
    theta_bar.iter_mut().for_each(|a| *a /= ja);
    f_bar.iter_mut().for_each(|a| *a /= ja);

    let dtheta: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.iter().zip(&theta_bar).map(|(a, b)| a - b).collect())
        .collect();
    let df: Vec<Vec<f64>> = outs
        .iter()
        .map(|f| f.iter().zip(&f_bar).map(|(a, b)| a - b).collect())
        .collect();
    let residuals: Vec<Vec<f64>> = outs
        .iter()
        .map(|f| {
            f.iter()
                .zip(z)
                .zip(weights)
                .map(|((fi, zi), w)| w * (fi - zi))
                .collect()
        })
        .collect();

    let kalman = match rule {
        UpdateRule::ExplicitEuler => None,
        UpdateRule::Kalman => Some(EnsembleSolve::new(&df, weights, ja / step)),
    };

    for (jj, &j) in active.iter().enumerate() {
        // Per-deviation inner products <F_k - F_mean, W (F_j - z)>.
        let inner: Vec<f64> = df
            .iter()
            .map(|dk| dk.iter().zip(&residuals[jj]).map(|(a, b)| a * b).sum())
            .collect();
        let coeffs: Vec<f64> = match &kalman {
            None => {
                let scale = -step / ja;
                inner.iter().map(|c| scale * c).collect()
            }
            Some(solve) => solve.apply(&inner).into_iter().map(|c| -c).collect(),
        };
        let mut delta = vec![0.0; n];
        for (c, dt) in coeffs.iter().zip(&dtheta) {
            delta.iter_mut().zip(dt).for_each(|(acc, v)| *acc += c * v);
        }
        let updated: Vec<f64> = params[jj]
            .iter()
            .zip(&delta)
            .map(|(p, dl)| p + dl)
            .collect();
        if updated.iter().all(|v| v.is_finite()) {
            next.members[j] = updated.into();
        } else {
            next.flags.reset.push(j);
        }
    }
    next
}

/// `(K + shift * I)^{-1}` for the weighted output Gram matrix `K`, via a symmetric
/// eigendecomposition of the rescaled system. Eigenvalues below `1e-13` of the largest are
/// treated as zero; in exact arithmetic they are bounded below by `shift`.
struct EnsembleSolve {
    vectors: DMatrix<f64>,
    inv_values: Vec<f64>,
    scale: f64,
}

impl EnsembleSolve {
    fn new(df: &[Vec<f64>], weights: &[f64], shift: f64) -> Self {
        let j = df.len();
        let scale = weights.iter().copied().fold(0.0, f64::max);
        let mut k = DMatrix::from_fn(j, j, |a, b| {
            df[a]
                .iter()
                .zip(&df[b])
                .zip(weights)
                .map(|((x, y), w)| x * (w / scale) * y)
                .sum::<f64>()
        });
        for i in 0..j {
            k[(i, i)] += shift / scale;
        }
        let eig = k.symmetric_eigen();
        let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        let inv_values = eig
            .eigenvalues
            .iter()
            .map(|&l| if l > top * 1e-13 { 1.0 / l } else { 0.0 })
            .collect();
        Self {
            vectors: eig.eigenvectors,
            inv_values,
            scale,
        }
    }

    fn apply(&self, b: &[f64]) -> Vec<f64> {
        let j = b.len();
        let proj: Vec<f64> = (0..j)
            .map(|c| {
                (0..j).map(|r| self.vectors[(r, c)] * b[r]).sum::<f64>() * self.inv_values[c]
                    / self.scale
            })
            .collect();
        (0..j)
            .map(|r| (0..j).map(|c| self.vectors[(r, c)] * proj[c]).sum())
            .collect()
    }
}

/// Appends `count` new members drawn from the ensemble's expansion stream.
pub fn ensemble_expand(
    ens: &Ensemble,
    count: usize,
    spec: &MlpSpec,
    source: &ExpansionSource,
) -> Result<Ensemble, EkiError> {
    if count == 0 {
        return Err(EkiError::InvalidParameter(
            "expansion count must be at least 1".into(),
        ));
    }
    if spec.param_count() != ens.dim() {
        return Err(EkiError::MemberDimension {
            index: ens.len(),
            expected: ens.dim(),
            actual: spec.param_count(),
        });
    }
    let mut next = ens.clone();
    let mean = ens.mean();
    for _ in 0..count {
        let draw = mlp_init(spec, &mut next.rng);
        let member = match source {
            ExpansionSource::Fresh => draw,
            ExpansionSource::PerturbMean { scale } => mean
                .as_slice()
                .iter()
                .zip(draw.as_slice())
                .map(|(m, d)| m + scale * d)
                .collect::<Vec<_>>()
                .into(),
        };
        next.members.push(member);
    }
    next.expansions.push(ExpansionRecord {
        epoch: ens.epoch,
        count,
        source: source.clone(),
    });
    Ok(next)
}

/// Index and value of the smallest loss; ties go to the lowest index.
pub fn min_loss_member(losses: &[f64]) -> Result<(usize, f64), EkiError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &l) in losses.iter().enumerate() {
        match best {
            Some((_, b)) if l.partial_cmp(&b) != Some(std::cmp::Ordering::Less) => {}
            _ => best = Some((i, l)),
        }
    }
    best.ok_or(EkiError::Empty)
}
