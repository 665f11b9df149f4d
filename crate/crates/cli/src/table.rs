//! Replicated comparison tables: median and minimum errors over seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::runner::{io_err, num, run_to_dir, RunError};

/// Median of a non-empty sample; the mean of the two middle values for even sizes.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn minimum(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub name: String,
    pub method: String,
    pub seeds: Vec<u64>,
    pub train_mse: Vec<f64>,
    pub test_mse: Vec<f64>,
    pub failures: usize,
}

impl TableRow {
    pub fn median_train(&self) -> f64 {
        median(&self.train_mse)
    }

    pub fn median_test(&self) -> f64 {
        median(&self.test_mse)
    }

    pub fn min_train(&self) -> f64 {
        minimum(&self.train_mse)
    }

    pub fn min_test(&self) -> f64 {
        minimum(&self.test_mse)
    }
}

/// Runs every config `replicates` times with seeds `seed, seed + 1, ...`; each run goes to
/// `out/<name>/seed-<s>`.
pub fn build_table(
    configs: &[ExperimentConfig],
    replicates: usize,
    out: &Path,
) -> Result<Vec<TableRow>, RunError> {
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let mut row = TableRow {
            name: cfg.name.clone(),
            method: cfg.optimizer.label(),
            seeds: Vec::new(),
            train_mse: Vec::new(),
            test_mse: Vec::new(),
            failures: 0,
        };
        for r in 0..replicates as u64 {
            let mut c = cfg.clone();
            c.seed = cfg.seed + r;
            let dir = out.join(&cfg.name).join(format!("seed-{}", c.seed));
            let outcome = run_to_dir(&c, &dir)?;
            let m = &outcome.report.final_metrics;
            row.seeds.push(c.seed);
            row.train_mse.push(m.train_mse);
            row.test_mse.push(m.test_mse);
            row.failures += usize::from(outcome.report.failure.is_some());
        }
        rows.push(row);
    }
    Ok(rows)
}

const COLUMNS: [&str; 7] = [
    "name",
    "method",
    "median_train_mse",
    "median_test_mse",
    "min_train_mse",
    "min_test_mse",
    "failures",
];

pub fn render_csv(rows: &[TableRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COLUMNS).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.name.clone(),
            r.method.clone(),
            num(r.median_train()),
            num(r.median_test()),
            num(r.min_train()),
            num(r.min_test()),
            r.failures.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

/// Fixed-width text rendering for terminals.
pub fn render_text(rows: &[TableRow]) -> String {
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                format!("{:.3e}", r.median_train()),
                format!("{:.3e}", r.median_test()),
                format!("{:.3e}", r.min_train()),
                format!("{:.3e}", r.min_test()),
                r.failures.to_string(),
            ]
        })
        .collect();
    let header = [
        "method",
        "median train",
        "median test",
        "min train",
        "min test",
        "failed",
    ];
    let mut widths = header.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut s = String::new();
    let line = |s: &mut String, row: &[&str]| {
        for (i, (c, w)) in row.iter().zip(widths).enumerate() {
            if i == 0 {
                let _ = write!(s, "{c:<w$}");
            } else {
                let _ = write!(s, "  {c:>w$}");
            }
        }
        s.push('\n');
    };
    line(&mut s, &header);
    for row in &cells {
        let refs: Vec<&str> = row.iter().map(String::as_str).collect();
        line(&mut s, &refs);
    }
    s
}

/// Writes `table.csv`, `table.txt` and `table.json` into `out`.
pub fn write_table(rows: &[TableRow], out: &Path) -> Result<(), RunError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    for (file, body) in [
        ("table.csv", render_csv(rows)),
        ("table.txt", render_text(rows)),
        (
            "table.json",
            serde_json::to_string_pretty(rows).expect("rows serialize") + "\n",
        ),
    ] {
        let path = out.join(file);
        fs::write(&path, body).map_err(io_err(&path))?;
    }
    Ok(())
}
