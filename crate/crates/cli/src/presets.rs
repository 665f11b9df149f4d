//! Built-in experiment configurations.

use std::path::PathBuf;

use eki_core::eki::{
    CovarianceSchedule, ExpansionSource, GammaSchedule, PiecewiseSchedule, ScheduleChange,
    UpdateRule,
};
use eki_core::problems::Assembly;

use crate::config::{
    ControlOptions, EkiOptions, ExpansionEvent, ExperimentConfig, OptimizerConfig, ProblemConfig,
};

/// Energy weights of the control sweep.
pub const CONTROL_MUS: [f64; 5] = [0.001, 0.0025, 0.005, 0.0075, 0.01];

pub const SYSID_EKI_EPOCHS: usize = 100;
pub const SYSID_GRADIENT_EPOCHS: usize = 2500;
pub const CONTROL_EKI_EPOCHS: usize = 10;
pub const CONTROL_GRADIENT_EPOCHS: usize = 150;

pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub config: ExperimentConfig,
}

fn base(
    name: &str,
    problem: ProblemConfig,
    optimizer: OptimizerConfig,
    epochs: usize,
) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        problem,
        optimizer,
        seed: 0,
        epochs: Some(epochs),
        wall_clock_budget_seconds: None,
        integrator: None,
        output_dir: PathBuf::from("runs").join(name),
    }
}

fn sysid_eki(gamma0: f64, alpha: f64, enabled: bool) -> OptimizerConfig {
    OptimizerConfig::Eki(EkiOptions {
        ensemble_size: 22,
        schedule: GammaSchedule::Exponential(CovarianceSchedule {
            gamma0,
            alpha,
            period: 2,
            enabled,
        }),
        step: 1.0,
        rule: UpdateRule::Kalman,
        expansions: Vec::new(),
    })
}

fn control_eki() -> OptimizerConfig {
    OptimizerConfig::Eki(EkiOptions {
        ensemble_size: 2,
        schedule: GammaSchedule::Piecewise(PiecewiseSchedule {
            initial: 0.3,
            changes: vec![ScheduleChange {
                from_epoch: 3,
                value: 0.15,
            }],
        }),
        step: 1.0,
        rule: UpdateRule::Kalman,
        expansions: vec![ExpansionEvent {
            epoch: 3,
            count: 20,
            source: ExpansionSource::Fresh,
        }],
    })
}

/// Each observed run is integrated from its own first point.
fn spiral() -> ProblemConfig {
    ProblemConfig::Spiral {
        assembly: Assembly::MultipleShooting,
    }
}

fn pendulum() -> ProblemConfig {
    ProblemConfig::Pendulum {
        omega: 1.0,
        assembly: Assembly::MultipleShooting,
    }
}

/// Every built-in preset, in listing order.
pub fn all() -> Vec<Preset> {
    let mut out = vec![
        Preset {
            name: "spiral-eki",
            description: "spiral, EKI J=22, exponential schedule gamma0=0.9 alpha=0.35",
            config: base(
                "spiral-eki",
                spiral(),
                sysid_eki(0.9, 0.35, true),
                SYSID_EKI_EPOCHS,
            ),
        },
        Preset {
            name: "spiral-eki-nosched",
            description: "spiral, EKI J=22, constant gamma=0.9",
            config: base(
                "spiral-eki-nosched",
                spiral(),
                sysid_eki(0.9, 0.35, false),
                SYSID_EKI_EPOCHS,
            ),
        },
    ];
    for (name, lr, adam) in [
        ("spiral-adam-0.01", 0.01, true),
        ("spiral-adam-0.1", 0.1, true),
        ("spiral-sgd-0.01", 0.01, false),
        ("spiral-sgd-0.1", 0.1, false),
    ] {
        let opt = if adam {
            OptimizerConfig::Adam { lr }
        } else {
            OptimizerConfig::Sgd { lr }
        };
        out.push(Preset {
            name,
            description: "spiral, BPTT through RK4 on the data grid, per-run shooting",
            config: base(name, spiral(), opt, SYSID_GRADIENT_EPOCHS),
        });
    }
    out.push(Preset {
        name: "pendulum-eki",
        description: "pendulum, EKI J=22, exponential schedule gamma0=2.0 alpha=0.4",
        config: base(
            "pendulum-eki",
            pendulum(),
            sysid_eki(2.0, 0.4, true),
            SYSID_EKI_EPOCHS,
        ),
    });
    out.push(Preset {
        name: "pendulum-eki-nosched",
        description: "pendulum, EKI J=22, constant gamma=2.0",
        config: base(
            "pendulum-eki-nosched",
            pendulum(),
            sysid_eki(2.0, 0.4, false),
            SYSID_EKI_EPOCHS,
        ),
    });
    for (name, lr, adam) in [
        ("pendulum-adam-0.01", 0.01, true),
        ("pendulum-adam-0.1", 0.1, true),
        ("pendulum-sgd-0.01", 0.01, false),
        ("pendulum-sgd-0.1", 0.1, false),
    ] {
        let opt = if adam {
            OptimizerConfig::Adam { lr }
        } else {
            OptimizerConfig::Sgd { lr }
        };
        out.push(Preset {
            name,
            description: "pendulum, BPTT through RK4 on the data grid, per-run shooting",
            config: base(name, pendulum(), opt, SYSID_GRADIENT_EPOCHS),
        });
    }
    for (name, mu) in [
        ("control-eki-mu0.001", CONTROL_MUS[0]),
        ("control-eki-mu0.0025", CONTROL_MUS[1]),
        ("control-eki-mu0.005", CONTROL_MUS[2]),
        ("control-eki-mu0.0075", CONTROL_MUS[3]),
        ("control-eki-mu0.01", CONTROL_MUS[4]),
    ] {
        out.push(Preset {
            name,
            description:
                "linear control, EKI J=2 then +20 and Gamma 0.3 -> 0.15 at epoch 3, Gamma'=0.01",
            config: base(
                name,
                ProblemConfig::LinearControl(ControlOptions::with_mu(mu)),
                control_eki(),
                CONTROL_EKI_EPOCHS,
            ),
        });
    }
    out.push(Preset {
        name: "control-adam",
        description: "linear control, BPTT + Adam lr=0.175 on the unit-covariance loss, mu=0.001",
        config: base(
            "control-adam",
            ProblemConfig::LinearControl(ControlOptions::with_mu(CONTROL_MUS[0])),
            OptimizerConfig::Adam { lr: 0.175 },
            CONTROL_GRADIENT_EPOCHS,
        ),
    });
    out
}

pub fn get(name: &str) -> Option<ExperimentConfig> {
    all().into_iter().find(|p| p.name == name).map(|p| p.config)
}

pub fn names() -> Vec<&'static str> {
    all().iter().map(|p| p.name).collect()
}

/// Column set of the spiral comparison table: EKI, SGD x2, Adam x2.
pub fn table_set(problem: &str) -> Option<Vec<ExperimentConfig>> {
    let names: [&str; 5] = match problem {
        "table1" | "spiral" => [
            "spiral-eki",
            "spiral-sgd-0.01",
            "spiral-sgd-0.1",
            "spiral-adam-0.01",
            "spiral-adam-0.1",
        ],
        "table2" | "pendulum" => [
            "pendulum-eki",
            "pendulum-sgd-0.01",
            "pendulum-sgd-0.1",
            "pendulum-adam-0.01",
            "pendulum-adam-0.1",
        ],
        _ => return None,
    };
    Some(
        names
            .iter()
            .map(|n| get(n).expect("built-in preset"))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_unique() {
        let all = all();
        for p in &all {
            p.config
                .validate()
                .unwrap_or_else(|e| panic!("{}: {e}", p.name));
            assert_eq!(p.config.name, p.name);
        }
        let mut names = names();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), all.len());
    }

    #[test]
    fn table_sets_have_five_columns() {
        assert_eq!(table_set("table1").unwrap().len(), 5);
        assert_eq!(table_set("table2").unwrap().len(), 5);
        assert!(table_set("table3").is_none());
    }
}
