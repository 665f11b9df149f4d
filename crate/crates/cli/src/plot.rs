//! Plot-ready CSV exports of finished runs, plus a matplotlib script that draws them.

use std::fs;
use std::path::{Path, PathBuf};

use eki_core::problems::control::control_rollout;
use eki_core::problems::sysid::predict_reference_grid;

use crate::runner::{build_problem, io_err, num, Problem, RunError, RunReport, LOG_FILE};

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const LOSS_FILE: &str = "loss_curve.csv";
pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const SCRIPT_FILE: &str = "plot.py";

fn write_csv(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<f64>>,
) -> Result<(), RunError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(row.into_iter().map(num))
            .expect("in-memory write");
    }
    let body = w.into_inner().expect("flush");
    fs::write(path, body).map_err(io_err(path))
}

/// Exports one run into `out` and returns the files written.
pub fn export_run(report_dir: &Path, out: &Path) -> Result<Vec<PathBuf>, RunError> {
    let report = RunReport::load(report_dir)?;
    let problem = build_problem(&report.config)?;
    let theta = report.theta.clone().into();
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut written = Vec::new();

    let traj_path = out.join(TRAJECTORY_FILE);
    match &problem {
        Problem::SysId(p) => {
            let pred = predict_reference_grid(&theta, p)?;
            let reference = &p.observations.reference;
            let rows = (0..reference.len()).map(|i| {
                let mut r = vec![reference.times[i]];
                r.extend_from_slice(&reference.states[i]);
                r.extend_from_slice(&pred.states[i]);
                r
            });
            write_csv(
                &traj_path,
                &["t", "true_x1", "true_x2", "pred_x1", "pred_x2"],
                rows,
            )?;

            let obs_path = out.join(OBSERVATIONS_FILE);
            let obs = &p.observations;
            let rows = obs.times.iter().zip(&obs.values).map(|(&t, v)| {
                let mut r = vec![t];
                r.extend_from_slice(v);
                r
            });
            write_csv(&obs_path, &["t", "x1", "x2"], rows)?;
            written.push(traj_path);
            written.push(obs_path);
        }
        Problem::Control { problem, .. } => {
            let roll = control_rollout(&theta, problem)?;
            let mut rows = Vec::with_capacity(roll.times.len());
            for (k, &t) in roll.times.iter().enumerate() {
                rows.push(vec![
                    t,
                    roll.states[k],
                    roll.controls[k],
                    problem.optimal_state(t)?,
                    problem.optimal_control(t)?,
                ]);
            }
            write_csv(&traj_path, &["t", "x", "u", "x_opt", "u_opt"], rows)?;
            written.push(traj_path);
        }
    }

    let log_path = report_dir.join(LOG_FILE);
    let log = fs::read_to_string(&log_path).map_err(io_err(&log_path))?;
    let mut reader = csv::Reader::from_reader(log.as_bytes());
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| RunError::Io {
            path: log_path.clone(),
            source: e.into(),
        })?;
        let field = |i: usize| {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .unwrap_or(f64::NAN)
        };
        rows.push(vec![field(0), field(3), field(5), field(6)]);
    }
    let loss_path = out.join(LOSS_FILE);
    write_csv(
        &loss_path,
        &["epoch", "min_loss", "train_mse", "test_mse"],
        rows,
    )?;
    written.push(loss_path);
    Ok(written)
}

/// Exports every run into `out/<run name>/` and writes one script that overlays them.
pub fn export_runs(report_dirs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>, RunError> {
    let mut written = Vec::new();
    let mut names = Vec::new();
    for dir in report_dirs {
        let report = RunReport::load(dir)?;
        let mut name = report.name.clone();
        if names.contains(&name) {
            name = format!("{name}-seed{}", report.seed);
        }
        written.extend(export_run(dir, &out.join(&name))?);
        names.push(name);
    }
    let script = out.join(SCRIPT_FILE);
    fs::write(&script, render_script(&names)).map_err(io_err(&script))?;
    written.push(script);
    Ok(written)
}

fn render_script(names: &[String]) -> String {
    let list = names
        .iter()
        .map(|n| format!("{n:?}"))
        .collect::<Vec<_>>()
        .join(", ");
    format!(
        r#"#!/usr/bin/env python3
# Draws the exported runs: trajectories, controls and loss curves.
import csv
import os
import matplotlib.pyplot as plt

HERE = os.path.dirname(os.path.abspath(__file__))
RUNS = [{list}]


def load(run, name):
    path = os.path.join(HERE, run, name)
    if not os.path.exists(path):
        return None
    with open(path) as f:
        rows = list(csv.DictReader(f))
    return {{k: [float(r[k]) for r in rows] for k in rows[0]}} if rows else None


fig, (ax_traj, ax_loss) = plt.subplots(1, 2, figsize=(11, 4.5))
control_reference_drawn = False
for run in RUNS:
    traj = load(run, "{traj}")
    if traj is None:
        continue
    if "u" in traj:
        if not control_reference_drawn:
            ax_traj.plot(traj["t"], traj["u_opt"], "k--", label="optimal u")
            control_reference_drawn = True
        ax_traj.plot(traj["t"], traj["u"], label=run)
        ax_traj.set_xlabel("t")
        ax_traj.set_ylabel("u")
    else:
        ax_traj.plot(traj["true_x1"], traj["true_x2"], "k--", lw=1, label="true")
        ax_traj.plot(traj["pred_x1"], traj["pred_x2"], label=run)
        obs = load(run, "{obs}")
        if obs is not None:
            ax_traj.plot(obs["x1"], obs["x2"], "o", ms=3, label=run + " data")
        ax_traj.set_xlabel("x1")
        ax_traj.set_ylabel("x2")
    loss = load(run, "{loss}")
    if loss is not None:
        ax_loss.semilogy(loss["epoch"], loss["min_loss"], label=run)
ax_loss.set_xlabel("epoch")
ax_loss.set_ylabel("loss")
ax_traj.legend(fontsize=7)
ax_loss.legend(fontsize=7)
fig.tight_layout()
fig.savefig(os.path.join(HERE, "plot.png"), dpi=150)
"#,
        traj = TRAJECTORY_FILE,
        obs = OBSERVATIONS_FILE,
        loss = LOSS_FILE,
    )
}
