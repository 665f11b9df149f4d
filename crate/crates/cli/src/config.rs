//! Experiment configuration: one JSON document per run.

use std::fmt;
use std::path::{Path, PathBuf};

use eki_core::eki::{ExpansionSource, GammaSchedule, UpdateRule};
use eki_core::ode::IntegratorConfig;
use eki_core::problems::{Assembly, ControlProblem, ControllerInput};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub problem: ProblemConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_budget_seconds: Option<f64>,
    /// Defaults to Dormand–Prince for EKI and RK4 on the data or quadrature grid for gradient runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrator: Option<IntegratorConfig>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    Spiral {
        #[serde(default)]
        assembly: Assembly,
    },
    Pendulum {
        #[serde(default = "one")]
        omega: f64,
        #[serde(default)]
        assembly: Assembly,
    },
    LinearControl(ControlOptions),
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlOptions {
    pub mu: f64,
    #[serde(default = "default_gamma_prime")]
    pub gamma_prime: f64,
    #[serde(default = "one")]
    pub a: f64,
    #[serde(default = "one")]
    pub b: f64,
    #[serde(default)]
    pub x0: f64,
    #[serde(default = "one")]
    pub x_star: f64,
    #[serde(default = "one")]
    pub horizon: f64,
    #[serde(default)]
    pub controller_input: ControllerInput,
    #[serde(default = "default_quadrature")]
    pub quadrature_intervals: usize,
}

fn default_gamma_prime() -> f64 {
    0.01
}

fn default_quadrature() -> usize {
    100
}

impl ControlOptions {
    pub fn with_mu(mu: f64) -> Self {
        Self {
            mu,
            gamma_prime: default_gamma_prime(),
            a: 1.0,
            b: 1.0,
            x0: 0.0,
            x_star: 1.0,
            horizon: 1.0,
            controller_input: ControllerInput::Time,
            quadrature_intervals: default_quadrature(),
        }
    }

    /// The control problem with the data-channel variance `gamma` (schedules override it per epoch).
    pub fn problem(&self, gamma: f64, integrator: IntegratorConfig) -> ControlProblem {
        let mut p = ControlProblem::linear_default(self.mu);
        p.a = self.a;
        p.b = self.b;
        p.x0 = self.x0;
        p.x_star = self.x_star;
        p.horizon = self.horizon;
        p.gamma = gamma;
        p.gamma_prime = self.gamma_prime;
        p.controller_input = self.controller_input;
        if self.controller_input == ControllerInput::TimeAndState {
            let mut sizes = p.controller.layer_sizes().to_vec();
            sizes[0] = 2;
            p.controller =
                eki_core::MlpSpec::new(sizes, p.controller.activation()).expect("valid layout");
        }
        p.quadrature_intervals = self.quadrature_intervals;
        p.integrator = integrator;
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Eki(EkiOptions),
    Adam { lr: f64 },
    Sgd { lr: f64 },
}

impl OptimizerConfig {
    pub fn is_gradient(&self) -> bool {
        !matches!(self, OptimizerConfig::Eki(_))
    }

    pub fn label(&self) -> String {
        match self {
            OptimizerConfig::Eki(_) => "EKI".into(),
            OptimizerConfig::Adam { lr } => format!("Adam (lr={lr})"),
            OptimizerConfig::Sgd { lr } => format!("SGD (lr={lr})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EkiOptions {
    pub ensemble_size: usize,
    /// Noise scale on the data block, per epoch.
    pub schedule: GammaSchedule,
    #[serde(default = "one")]
    pub step: f64,
    #[serde(default)]
    pub rule: UpdateRule,
    #[serde(default)]
    pub expansions: Vec<ExpansionEvent>,
}

/// Adds `count` members at the start of `epoch`, before that epoch's evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpansionEvent {
    pub epoch: usize,
    pub count: usize,
    #[serde(default = "fresh")]
    pub source: ExpansionSource,
}

fn fresh() -> ExpansionSource {
    ExpansionSource::Fresh
}

/// Stopping rule resolved from the config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Epochs(usize),
    WallClock(f64),
}

/// One validation failure, located by a dotted path into the document.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, issue) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{}: {}", issue.path, issue.message)?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

impl ConfigErrors {
    fn single(path: &str, message: impl Into<String>) -> Self {
        Self(vec![ConfigIssue {
            path: path.into(),
            message: message.into(),
        }])
    }
}

impl ExperimentConfig {
    /// Parses and validates a JSON document. Syntax and type errors carry the offending path.
    pub fn from_json(text: &str) -> Result<Self, ConfigErrors> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigErrors::single(
                if path.is_empty() { "." } else { &path },
                e.inner().to_string(),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigErrors> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ConfigErrors::single(".", format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn budget(&self) -> Budget {
        match (self.epochs, self.wall_clock_budget_seconds) {
            (Some(e), _) => Budget::Epochs(e),
            (None, Some(s)) => Budget::WallClock(s),
            (None, None) => Budget::Epochs(0),
        }
    }

    pub fn is_control(&self) -> bool {
        matches!(self.problem, ProblemConfig::LinearControl(_))
    }

    /// Integrator used for the forward map.
    pub fn resolved_integrator(&self, grid_spacing: f64) -> IntegratorConfig {
        if let Some(cfg) = self.integrator {
            return cfg;
        }
        if self.optimizer.is_gradient() {
            IntegratorConfig::rk4(grid_spacing)
        } else {
            IntegratorConfig::default()
        }
    }

    /// Collects every violated constraint.
    pub fn validate(&self) -> Result<(), ConfigErrors> {
        let mut issues = Vec::new();
        let mut bad = |path: &str, message: String| {
            issues.push(ConfigIssue {
                path: path.into(),
                message,
            })
        };
        let positive = |v: f64| v.is_finite() && v > 0.0;

        if self.name.trim().is_empty() {
            bad("name", "must not be empty".into());
        }
        match (self.epochs, self.wall_clock_budget_seconds) {
            (Some(_), Some(_)) | (None, None) => bad(
                "epochs",
                "exactly one of `epochs` and `wall_clock_budget_seconds` must be set".into(),
            ),
            (None, Some(s)) if !positive(s) => bad(
                "wall_clock_budget_seconds",
                format!("must be positive, got {s}"),
            ),
            _ => {}
        }
        if self.output_dir.as_os_str().is_empty() {
            bad("output_dir", "must not be empty".into());
        }

        match &self.problem {
            ProblemConfig::Spiral { .. } => {}
            ProblemConfig::Pendulum { omega, .. } => {
                if !positive(*omega) {
                    bad("problem.omega", format!("must be positive, got {omega}"));
                }
            }
            ProblemConfig::LinearControl(c) => {
                if !(c.mu.is_finite() && c.mu >= 0.0) {
                    bad("problem.mu", format!("must be non-negative, got {}", c.mu));
                }
                if !self.optimizer.is_gradient() && c.mu <= 0.0 {
                    bad(
                        "problem.mu",
                        "EKI on the regularized problem needs mu > 0".into(),
                    );
                }
                if !positive(c.gamma_prime) {
                    bad(
                        "problem.gamma_prime",
                        format!("must be positive, got {}", c.gamma_prime),
                    );
                }
                if !(c.a.is_finite() && c.a != 0.0) {
                    bad("problem.a", "must be finite and non-zero".into());
                }
                if !(c.b.is_finite() && c.b != 0.0) {
                    bad("problem.b", "must be finite and non-zero".into());
                }
                if !(c.x0.is_finite() && c.x_star.is_finite()) {
                    bad("problem.x0", "x0 and x_star must be finite".into());
                }
                if !positive(c.horizon) {
                    bad(
                        "problem.horizon",
                        format!("must be positive, got {}", c.horizon),
                    );
                }
                if c.quadrature_intervals == 0 {
                    bad("problem.quadrature_intervals", "must be at least 1".into());
                }
            }
        }

        match &self.optimizer {
            OptimizerConfig::Eki(e) => {
                if e.ensemble_size < 2 {
                    bad(
                        "optimizer.ensemble_size",
                        format!("must be at least 2, got {}", e.ensemble_size),
                    );
                }
                if let Err(err) = e.schedule.validate() {
                    bad("optimizer.schedule", err.to_string());
                }
                if !positive(e.step) {
                    bad(
                        "optimizer.step",
                        format!("must be positive, got {}", e.step),
                    );
                }
                for (i, x) in e.expansions.iter().enumerate() {
                    if x.count == 0 {
                        bad(
                            &format!("optimizer.expansions[{i}].count"),
                            "must be at least 1".into(),
                        );
                    }
                    if let ExpansionSource::PerturbMean { scale } = x.source {
                        if !(scale.is_finite() && scale >= 0.0) {
                            bad(
                                &format!("optimizer.expansions[{i}].source.scale"),
                                "must be non-negative".into(),
                            );
                        }
                    }
                }
            }
            OptimizerConfig::Adam { lr } | OptimizerConfig::Sgd { lr } => {
                if !positive(*lr) {
                    bad("optimizer.lr", format!("must be positive, got {lr}"));
                }
            }
        }

        if let Some(integ) = &self.integrator {
            if let Err(err) = integ.validate() {
                bad("integrator", err.to_string());
            }
            if self.optimizer.is_gradient() && !integ.is_fixed_step() {
                bad(
                    "integrator.method",
                    "gradient optimizers need a fixed-step method (euler or rk4)".into(),
                );
            }
        }

        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(issues))
        }
    }
}
