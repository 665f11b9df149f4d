use std::fs;
use std::path::Path;
use std::process::Command;

use eki_core::nnet::mlp_init;
use eki_core::rng::{stream, Stream};
use eki_node::config::ExperimentConfig;
use eki_node::runner::{
    build_problem, evaluate, render_log, run, run_to_dir, RunReport, LOG_HEADER,
};
use eki_node::table::{build_table, median};
use eki_node::{plot, presets};

fn preset(name: &str, epochs: usize) -> ExperimentConfig {
    let mut cfg = presets::get(name).unwrap();
    cfg.epochs = Some(epochs);
    cfg
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

#[test]
fn zero_epochs_reports_the_initial_state() {
    let cfg = preset("spiral-adam-0.01", 0);
    let out = run(&cfg).unwrap();
    assert_eq!(out.log.len(), 1);
    assert_eq!(out.report.epochs_completed, 0);
    let problem = build_problem(&cfg).unwrap();
    let initial = mlp_init(problem.net(), &mut stream(cfg.seed, Stream::Init));
    assert_eq!(out.report.theta, initial.into_inner());
    assert_eq!(out.report.final_metrics.loss, out.log[0].min_loss);

    let cfg = preset("spiral-eki", 0);
    let out = run(&cfg).unwrap();
    assert_eq!(out.log.len(), 1);
    assert_eq!(out.report.final_metrics.train_mse, out.log[0].min_loss);
}

#[test]
fn identical_configs_give_bitwise_identical_logs() {
    for name in ["spiral-eki", "control-eki-mu0.005", "pendulum-sgd-0.01"] {
        let cfg = preset(name, 6);
        let a = render_log(&run(&cfg).unwrap().log);
        let b = render_log(&run(&cfg).unwrap().log);
        assert_eq!(a, b, "{name}");
        assert_eq!(a.lines().count(), 1 + 7);
    }
}

#[test]
fn reported_errors_are_reproduced_from_serialized_parameters() {
    let dir = tempfile::tempdir().unwrap();
    for (name, epochs) in [
        ("spiral-eki", 8),
        ("pendulum-adam-0.1", 20),
        ("control-eki-mu0.001", 10),
    ] {
        let cfg = preset(name, epochs);
        let out_dir = dir.path().join(name);
        run_to_dir(&cfg, &out_dir).unwrap();
        let report = RunReport::load(&out_dir).unwrap();
        let again = evaluate(&report.config, &report.theta, report.epochs_completed).unwrap();
        let m = &report.final_metrics;
        assert!(rel_close(again.train_mse, m.train_mse, 1e-12), "{name}");
        assert!(rel_close(again.test_mse, m.test_mse, 1e-12), "{name}");
        assert!(rel_close(again.loss, m.loss, 1e-12), "{name}");
        if let Some(best) = &report.best {
            let b = evaluate(&report.config, &best.theta, best.epoch).unwrap();
            assert!(rel_close(b.train_mse, best.train_mse, 1e-12), "{name} best");
        }
    }
}

#[test]
fn log_has_the_documented_columns() {
    let out = run(&preset("control-adam", 3)).unwrap();
    let text = render_log(&out.log);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), LOG_HEADER.join(","));
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[1], "", "gradient runs have no gamma");
    assert_eq!(first[2], "1");
}

#[test]
fn ensemble_grows_at_the_configured_epoch() {
    let out = run(&preset("control-eki-mu0.0025", 5)).unwrap();
    let sizes: Vec<usize> = out.log.iter().map(|r| r.ensemble_size).collect();
    assert_eq!(sizes, vec![2, 2, 2, 22, 22, 22]);
    let gammas: Vec<f64> = out.log.iter().map(|r| r.gamma.unwrap()).collect();
    assert_eq!(gammas, vec![0.3, 0.3, 0.3, 0.15, 0.15, 0.15]);
    assert_eq!(out.report.final_ensemble_size, Some(22));
}

#[test]
fn wall_clock_mode_stops() {
    let mut cfg = preset("spiral-eki", 0);
    cfg.epochs = None;
    cfg.wall_clock_budget_seconds = Some(0.2);
    let out = run(&cfg).unwrap();
    assert!(out.report.runtime_seconds >= 0.2);
    assert_eq!(out.log.len(), out.report.epochs_completed + 1);
}

#[test]
fn table_medians_match_a_manual_sort() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = preset("control-eki-mu0.005", 4);
    let rows = build_table(std::slice::from_ref(&cfg), 3, dir.path()).unwrap();
    assert_eq!(rows.len(), 1);
    let row = &rows[0];
    assert_eq!(row.seeds, vec![0, 1, 2]);
    let mut sorted = row.train_mse.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(row.median_train(), sorted[1]);
    assert_eq!(row.min_train(), sorted[0]);
    assert_eq!(median(&[1.0, 5.0, 2.0, 8.0]), 3.5);

    let single = build_table(std::slice::from_ref(&cfg), 1, &dir.path().join("one")).unwrap();
    let report = run(&cfg).unwrap().report;
    assert_eq!(single[0].median_train(), report.final_metrics.train_mse);
    assert_eq!(single[0].median_test(), report.final_metrics.test_mse);
}

#[test]
fn table_presets_have_five_columns() {
    let labels: Vec<String> = presets::table_set("table1")
        .unwrap()
        .iter()
        .map(|c| c.optimizer.label())
        .collect();
    assert_eq!(
        labels,
        [
            "EKI",
            "SGD (lr=0.01)",
            "SGD (lr=0.1)",
            "Adam (lr=0.01)",
            "Adam (lr=0.1)"
        ]
    );
}

fn names_in(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

#[test]
fn plot_exports_spiral_files() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    run_to_dir(&preset("spiral-eki", 4), &run_dir).unwrap();
    let out = dir.path().join("plots");
    plot::export_runs(&[run_dir], &out).unwrap();
    assert_eq!(names_in(&out), ["plot.py", "spiral-eki"]);
    assert_eq!(
        names_in(&out.join("spiral-eki")),
        ["loss_curve.csv", "observations.csv", "trajectory.csv"]
    );
    let loss = fs::read_to_string(out.join("spiral-eki/loss_curve.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 5);
    let traj = fs::read_to_string(out.join("spiral-eki/trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 500);
    let obs = fs::read_to_string(out.join("spiral-eki/observations.csv")).unwrap();
    assert_eq!(obs.lines().count(), 1 + 100);
}

#[test]
fn plot_overlays_a_mu_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for name in presets::names()
        .into_iter()
        .filter(|n| n.starts_with("control-eki"))
    {
        let d = dir.path().join(name);
        run_to_dir(&preset(name, 2), &d).unwrap();
        runs.push(d);
    }
    assert_eq!(runs.len(), 5);
    let out = dir.path().join("plots");
    let files = plot::export_runs(&runs, &out).unwrap();
    let trajectories = files
        .iter()
        .filter(|f| f.ends_with("trajectory.csv"))
        .count();
    assert_eq!(trajectories, 5);
    let script = fs::read_to_string(out.join("plot.py")).unwrap();
    assert!(script.contains("u_opt"));
    let header = fs::read_to_string(out.join("control-eki-mu0.001/trajectory.csv")).unwrap();
    assert!(header.starts_with("t,x,u,x_opt,u_opt\n"));
}

#[test]
fn plot_of_missing_report_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert!(plot::export_runs(&[dir.path().join("nope")], &dir.path().join("p")).is_err());
}

fn cli() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_eki-node"));
    c.env_remove("EKI_NODE_SEED");
    c
}

#[test]
fn cli_exit_codes_and_seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(
        &bad,
        r#"{"name": "b", "problem": {"kind": "spiral"}, "optimizer": {"kind": "sgd", "lr": -1}}"#,
    )
    .unwrap();
    let out = cli().args(["run", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("optimizer.lr") && stderr.contains("epochs"),
        "{stderr}"
    );

    let run_dir = |tag: &str| dir.path().join(tag);
    let status = cli()
        .args([
            "run",
            "--preset",
            "control-eki-mu0.01",
            "--epochs",
            "2",
            "--out",
        ])
        .arg(run_dir("env"))
        .env("EKI_NODE_SEED", "7")
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(0));
    assert_eq!(RunReport::load(&run_dir("env")).unwrap().seed, 7);

    let status = cli()
        .args([
            "run",
            "--preset",
            "control-eki-mu0.01",
            "--epochs",
            "2",
            "--seed",
            "3",
            "--out",
        ])
        .arg(run_dir("flag"))
        .env("EKI_NODE_SEED", "7")
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(0));
    assert_eq!(RunReport::load(&run_dir("flag")).unwrap().seed, 3);

    let out = cli()
        .args(["run", "--preset", "no-such-preset"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = cli()
        .args(["plot", "--report"])
        .arg(run_dir("missing"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let listing = cli().arg("presets").output().unwrap();
    let text = String::from_utf8(listing.stdout).unwrap();
    assert_eq!(text.lines().count(), presets::all().len());
}
