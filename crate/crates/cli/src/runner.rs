//! Training loops for both optimizer families, per-epoch logging and run reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use eki_core::eki::{
    eki_update, ensemble_expand, min_loss_member, BlockCovariance, EkiError, Ensemble,
    ForwardMapOutput, NoiseModel, FAILED_MEMBER_LOSS,
};
use eki_core::gradbase::{
    adam_step, sgd_step, AdamConfig, AdamState, DifferentiableLoss, GradError,
};
use eki_core::nnet::mlp_init;
use eki_core::problems::control::{control_loss_from_output, control_rollout, trapezoid_energy};
use eki_core::problems::sysid::mse_from_output;
use eki_core::problems::{
    control_forward_map, sysid_forward_map, test_mse, ControlProblem, ProblemError, SysIdProblem,
    SysIdSetup, TrueSystem,
};
use eki_core::rng::{stream, Stream, GENERATOR_NAME};
use eki_core::{MlpSpec, ParamVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{
    Budget, ConfigErrors, ControlOptions, ExperimentConfig, OptimizerConfig, ProblemConfig,
};

pub const LOG_FILE: &str = "log.csv";
pub const REPORT_FILE: &str = "report.json";
pub const LOG_HEADER: [&str; 7] = [
    "epoch",
    "gamma",
    "J",
    "min_loss",
    "mean_loss",
    "train_mse",
    "test_mse",
];

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration:\n{0}")]
    Config(#[from] ConfigErrors),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Eki(#[from] EkiError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed report {path}: {source}")]
    Report {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("theta has {actual} entries, the configured network needs {expected}")]
    ThetaLength { expected: usize, actual: usize },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One row of the per-epoch log. For control problems `train_mse` is the squared terminal miss
/// and `test_mse` the mean squared deviation from the optimal control on the quadrature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub gamma: Option<f64>,
    pub ensemble_size: usize,
    pub min_loss: f64,
    pub mean_loss: f64,
    pub train_mse: f64,
    pub test_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSummary {
    pub energy: f64,
    pub optimal_energy: f64,
    pub terminal_state: f64,
    pub terminal_miss: f64,
    pub mse_vs_optimal: f64,
}

/// JSON has no non-finite numbers: they are written as `null` and read back as NaN.
mod lenient {
    use serde::{Deserialize, Deserializer};

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Errors of a parameter vector on the configured problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(deserialize_with = "lenient::deserialize")]
    pub loss: f64,
    #[serde(deserialize_with = "lenient::deserialize")]
    pub train_mse: f64,
    #[serde(deserialize_with = "lenient::deserialize")]
    pub test_mse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlSummary>,
}

impl Metrics {
    fn failed() -> Self {
        Self {
            loss: f64::NAN,
            train_mse: f64::NAN,
            test_mse: f64::NAN,
            control: None,
        }
    }
}

/// Lowest training error seen over the run (system identification only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub train_mse: f64,
    #[serde(deserialize_with = "lenient::deserialize")]
    pub test_mse: f64,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub version: String,
    pub rng: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub epochs_completed: usize,
    pub runtime_seconds: f64,
    pub log_file: String,
    /// Final parameters: the minimum-loss member for EKI, the iterate for gradient runs.
    pub theta: Vec<f64>,
    pub final_metrics: Metrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best: Option<BestRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_ensemble_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl RunReport {
    pub fn load(dir: &Path) -> Result<Self, RunError> {
        let path = dir.join(REPORT_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|source| RunError::Report { path, source })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub log: Vec<EpochRecord>,
}

/// The configured problem instance.
#[derive(Debug, Clone)]
pub enum Problem {
    SysId(SysIdProblem),
    Control {
        options: ControlOptions,
        problem: ControlProblem,
    },
}

impl Problem {
    pub fn net(&self) -> &MlpSpec {
        match self {
            Problem::SysId(p) => &p.net,
            Problem::Control { problem, .. } => &problem.controller,
        }
    }
}

/// Builds the problem; observation subsets come from the seed's data stream.
pub fn build_problem(cfg: &ExperimentConfig) -> Result<Problem, RunError> {
    cfg.validate()?;
    match &cfg.problem {
        ProblemConfig::Spiral { assembly } | ProblemConfig::Pendulum { assembly, .. } => {
            let mut setup = match cfg.problem {
                ProblemConfig::Pendulum { omega, .. } => {
                    let mut s = SysIdSetup::pendulum();
                    s.system = TrueSystem::Pendulum { omega };
                    s
                }
                _ => SysIdSetup::spiral(),
            };
            setup.assembly = *assembly;
            let spacing = setup.horizon / (setup.grid_size - 1) as f64;
            let integrator = cfg.resolved_integrator(spacing);
            Ok(Problem::SysId(
                setup.build(integrator, &mut stream(cfg.seed, Stream::Data))?,
            ))
        }
        ProblemConfig::LinearControl(options) => {
            let spacing = options.horizon / options.quadrature_intervals as f64;
            let integrator = cfg.resolved_integrator(spacing);
            let problem = match &cfg.optimizer {
                OptimizerConfig::Eki(e) => options.problem(e.schedule.value_at(0), integrator),
                _ => options.problem(1.0, integrator).with_unit_covariances(),
            };
            problem.validate()?;
            Ok(Problem::Control {
                options: *options,
                problem,
            })
        }
    }
}

/// Data-channel variance at `epoch` (1 for gradient runs).
fn gamma_for(cfg: &ExperimentConfig, epoch: usize) -> f64 {
    match &cfg.optimizer {
        OptimizerConfig::Eki(e) => e.schedule.value_at(epoch),
        _ => 1.0,
    }
}

fn control_summary(
    theta: &ParamVector,
    prob: &ControlProblem,
) -> Result<ControlSummary, ProblemError> {
    let rollout = control_rollout(theta, prob)?;
    let energy = trapezoid_energy(&rollout.controls, &prob.quadrature_weights());
    let mut sq = 0.0;
    for (&t, &u) in rollout.times.iter().zip(&rollout.controls) {
        sq += (u - prob.optimal_control(t)?).powi(2);
    }
    let terminal = rollout.terminal_state();
    Ok(ControlSummary {
        energy,
        optimal_energy: prob.optimal_energy()?,
        terminal_state: terminal,
        terminal_miss: (terminal - prob.x_star).abs(),
        mse_vs_optimal: sq / rollout.times.len() as f64,
    })
}

fn evaluate_on(problem: &Problem, theta: &ParamVector, gamma: f64) -> Result<Metrics, RunError> {
    let expected = problem.net().param_count();
    if theta.len() != expected {
        return Err(RunError::ThetaLength {
            expected,
            actual: theta.len(),
        });
    }
    match problem {
        Problem::SysId(p) => {
            let out = sysid_forward_map(theta, p)?;
            let train = mse_from_output(&out, p);
            Ok(Metrics {
                loss: train,
                train_mse: train,
                test_mse: test_mse(theta, p)?,
                control: None,
            })
        }
        Problem::Control { problem, .. } => {
            let out = control_forward_map(theta, problem)?;
            let summary = control_summary(theta, problem)?;
            Ok(Metrics {
                loss: control_loss_from_output(&out, problem, gamma),
                train_mse: summary.terminal_miss.powi(2),
                test_mse: summary.mse_vs_optimal,
                control: Some(summary),
            })
        }
    }
}

/// Re-evaluates `theta` against the configured problem, with the covariance of `epoch`.
pub fn evaluate(cfg: &ExperimentConfig, theta: &[f64], epoch: usize) -> Result<Metrics, RunError> {
    let problem = build_problem(cfg)?;
    evaluate_on(&problem, &theta.to_vec().into(), gamma_for(cfg, epoch))
}

struct Clock {
    start: Instant,
    budget: Budget,
}

impl Clock {
    fn done(&self, epoch: usize) -> bool {
        match self.budget {
            Budget::Epochs(e) => epoch >= e,
            Budget::WallClock(s) => self.start.elapsed().as_secs_f64() >= s,
        }
    }
}

/// Runs the experiment in memory.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    let problem = build_problem(cfg)?;
    let clock = Clock {
        start: Instant::now(),
        budget: cfg.budget(),
    };
    let trained = match &cfg.optimizer {
        OptimizerConfig::Eki(_) => train_eki(cfg, &problem, &clock)?,
        _ => train_gradient(cfg, &problem, &clock)?,
    };
    let last_epoch = trained.log.last().map_or(0, |r| r.epoch);
    let mut failure = trained.failure;
    let final_metrics = match evaluate_on(&problem, &trained.theta, gamma_for(cfg, last_epoch)) {
        Ok(m) => m,
        Err(RunError::Problem(err)) => {
            failure.get_or_insert_with(|| format!("final parameters cannot be evaluated: {err}"));
            Metrics::failed()
        }
        Err(other) => return Err(other),
    };
    let report = RunReport {
        name: cfg.name.clone(),
        version: env!("CARGO_PKG_VERSION").into(),
        rng: GENERATOR_NAME.into(),
        seed: cfg.seed,
        config: cfg.clone(),
        epochs_completed: last_epoch,
        runtime_seconds: clock.start.elapsed().as_secs_f64(),
        log_file: LOG_FILE.into(),
        theta: trained.theta.into_inner(),
        final_metrics,
        best: trained.best,
        final_ensemble_size: trained.ensemble_size,
        failure,
    };
    Ok(RunOutcome {
        report,
        log: trained.log,
    })
}

/// Runs the experiment and writes `log.csv` and `report.json` into `dir`.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutcome, RunError> {
    let outcome = run(cfg)?;
    write_outputs(&outcome, dir)?;
    Ok(outcome)
}

pub fn write_outputs(outcome: &RunOutcome, dir: &Path) -> Result<(), RunError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let log_path = dir.join(LOG_FILE);
    fs::write(&log_path, render_log(&outcome.log)).map_err(io_err(&log_path))?;
    let report_path = dir.join(REPORT_FILE);
    let json = serde_json::to_string_pretty(&outcome.report).expect("report serializes");
    fs::write(&report_path, json + "\n").map_err(io_err(&report_path))?;
    Ok(())
}

/// Formats with 17 significant digits.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn render_log(log: &[EpochRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(LOG_HEADER).expect("in-memory write");
    for r in log {
        w.write_record([
            r.epoch.to_string(),
            r.gamma.map(num).unwrap_or_default(),
            r.ensemble_size.to_string(),
            num(r.min_loss),
            num(r.mean_loss),
            num(r.train_mse),
            num(r.test_mse),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

struct Trained {
    theta: ParamVector,
    log: Vec<EpochRecord>,
    best: Option<BestRecord>,
    ensemble_size: Option<usize>,
    failure: Option<String>,
}

fn mean_of_finite(losses: &[Option<f64>]) -> f64 {
    let ok: Vec<f64> = losses
        .iter()
        .flatten()
        .copied()
        .filter(|v| v.is_finite())
        .collect();
    if ok.is_empty() {
        FAILED_MEMBER_LOSS
    } else {
        ok.iter().sum::<f64>() / ok.len() as f64
    }
}

fn update_best(
    best: &mut Option<BestRecord>,
    epoch: usize,
    train: f64,
    test: f64,
    theta: &ParamVector,
) {
    if best.as_ref().is_none_or(|b| train < b.train_mse) {
        *best = Some(BestRecord {
            epoch,
            train_mse: train,
            test_mse: test,
            theta: theta.as_slice().to_vec(),
        });
    }
}

fn train_eki(
    cfg: &ExperimentConfig,
    problem: &Problem,
    clock: &Clock,
) -> Result<Trained, RunError> {
    let OptimizerConfig::Eki(opts) = &cfg.optimizer else {
        unreachable!("dispatched on the optimizer kind")
    };
    let spec = problem.net().clone();
    let mut ens = Ensemble::initialize(
        &spec,
        opts.ensemble_size,
        &mut stream(cfg.seed, Stream::Init),
        stream(cfg.seed, Stream::Expansion),
    )?;
    let (target, base_control) = match problem {
        Problem::SysId(p) => (p.observation_vector(), None),
        Problem::Control { problem, .. } => (vec![problem.x_star], Some(problem)),
    };

    let mut log = Vec::new();
    let mut best = None;
    let mut epoch = 0;
    loop {
        for ev in opts.expansions.iter().filter(|e| e.epoch == epoch) {
            ens = ensemble_expand(&ens, ev.count, &spec, &ev.source)?;
        }
        let gamma = opts.schedule.value_at(epoch);
        let outputs: Vec<Option<ForwardMapOutput>> = ens
            .members()
            .par_iter()
            .map(|theta| match problem {
                Problem::SysId(p) => sysid_forward_map(theta, p).ok(),
                Problem::Control { problem, .. } => control_forward_map(theta, problem).ok(),
            })
            .collect();
        let losses: Vec<Option<f64>> = outputs
            .iter()
            .map(|o| {
                o.as_ref().map(|o| match problem {
                    Problem::SysId(p) => mse_from_output(o, p),
                    Problem::Control { problem, .. } => control_loss_from_output(o, problem, gamma),
                })
            })
            .collect();
        let penalized: Vec<f64> = losses
            .iter()
            .map(|l| l.filter(|v| v.is_finite()).unwrap_or(FAILED_MEMBER_LOSS))
            .collect();
        let (bi, min_loss) = min_loss_member(&penalized)?;
        let leader = &ens.members()[bi];
        let (train, test) = match problem {
            Problem::SysId(p) => (min_loss, test_mse(leader, p).unwrap_or(f64::INFINITY)),
            Problem::Control { problem, .. } => match control_summary(leader, problem) {
                Ok(s) => (s.terminal_miss.powi(2), s.mse_vs_optimal),
                Err(_) => (f64::INFINITY, f64::INFINITY),
            },
        };
        if matches!(problem, Problem::SysId(_)) {
            update_best(&mut best, epoch, train, test, leader);
        }
        log.push(EpochRecord {
            epoch,
            gamma: Some(gamma),
            ensemble_size: ens.len(),
            min_loss,
            mean_loss: mean_of_finite(&losses),
            train_mse: train,
            test_mse: test,
        });
        if clock.done(epoch) {
            return Ok(Trained {
                theta: leader.clone(),
                log,
                best,
                ensemble_size: Some(ens.len()),
                failure: None,
            });
        }

        let refs: Vec<Option<&ForwardMapOutput>> = outputs.iter().map(Option::as_ref).collect();
        let noise = match base_control {
            None => NoiseModel::Isotropic { gamma },
            Some(p) => NoiseModel::Block(BlockCovariance {
                gamma,
                gamma_prime: p.gamma_prime,
                mu: p.mu,
            }),
        };
        ens = eki_update(&ens, &refs, &target, &noise, opts.rule, opts.step)?;
        epoch += 1;
    }
}

fn train_gradient(
    cfg: &ExperimentConfig,
    problem: &Problem,
    clock: &Clock,
) -> Result<Trained, RunError> {
    let spec = problem.net().clone();
    let mut theta = mlp_init(&spec, &mut stream(cfg.seed, Stream::Init));
    let mut adam = AdamState::new(theta.len());
    let unfold = match problem {
        Problem::SysId(p) => p.integrator,
        Problem::Control { problem, .. } => problem.integrator,
    };
    let mut log = Vec::new();
    let mut best = None;
    let mut failure = None;
    let mut epoch = 0;
    loop {
        let lg = match problem {
            Problem::SysId(p) => p.loss_and_gradient(&theta, &unfold),
            Problem::Control { problem, .. } => problem.loss_and_gradient(&theta, &unfold),
        };
        let lg = match lg {
            Ok(lg) => lg,
            Err(err) => {
                failure = Some(gradient_failure(epoch, &err));
                break;
            }
        };
        let (train, test) = match problem {
            Problem::SysId(p) => (lg.loss, test_mse(&theta, p).unwrap_or(f64::INFINITY)),
            Problem::Control { problem, .. } => match control_summary(&theta, problem) {
                Ok(s) => (s.terminal_miss.powi(2), s.mse_vs_optimal),
                Err(_) => (f64::INFINITY, f64::INFINITY),
            },
        };
        if matches!(problem, Problem::SysId(_)) {
            update_best(&mut best, epoch, train, test, &theta);
        }
        log.push(EpochRecord {
            epoch,
            gamma: None,
            ensemble_size: 1,
            min_loss: lg.loss,
            mean_loss: lg.loss,
            train_mse: train,
            test_mse: test,
        });
        if clock.done(epoch) {
            break;
        }
        let mut next = theta.clone().into_inner();
        match cfg.optimizer {
            OptimizerConfig::Adam { lr } => {
                adam_step(&mut next, &lg.gradient, &mut adam, &AdamConfig::with_lr(lr))
            }
            OptimizerConfig::Sgd { lr } => sgd_step(&mut next, &lg.gradient, lr),
            OptimizerConfig::Eki(_) => unreachable!("dispatched on the optimizer kind"),
        }
        if next.iter().any(|v| !v.is_finite()) {
            failure = Some(format!(
                "epoch {epoch}: optimizer produced non-finite parameters"
            ));
            break;
        }
        theta = next.into();
        epoch += 1;
    }
    Ok(Trained {
        theta,
        log,
        best,
        ensemble_size: None,
        failure,
    })
}

fn gradient_failure(epoch: usize, err: &GradError) -> String {
    format!("epoch {epoch}: {err}")
}
