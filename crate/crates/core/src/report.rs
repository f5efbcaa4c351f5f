//! Tables and CSV files built from finished runs.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{CflError, Result};
use crate::fl::{Mode, RunOutput};

/// Named columns of equal length.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportTable {
    names: Vec<String>,
    columns: Vec<Vec<String>>,
}

impl ReportTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn column(&self, name: &str) -> Option<&[String]> {
        self.names.iter().position(|n| n == name).map(|i| self.columns[i].as_slice())
    }

    pub fn push_column(&mut self, name: impl Into<String>, values: Vec<String>) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.contains([',', '"', '\n']) {
            return Err(CflError::Report(format!("bad column name '{}'", name)));
        }
        if self.names.contains(&name) {
            return Err(CflError::Report(format!("duplicate column '{}'", name)));
        }
        if !self.columns.is_empty() && values.len() != self.rows() {
            return Err(CflError::Report(format!(
                "column '{}' has {} rows, table has {}",
                name,
                values.len(),
                self.rows()
            )));
        }
        self.names.push(name);
        self.columns.push(values);
        Ok(())
    }

    pub fn push_numbers(&mut self, name: impl Into<String>, values: &[f64]) -> Result<()> {
        self.push_column(name, values.iter().map(|v| v.to_string()).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.names.join(",");
        out.push('\n');
        for r in 0..self.rows() {
            let row: Vec<&str> = self.columns.iter().map(|c| c[r].as_str()).collect();
            out += &row.join(",");
            out.push('\n');
        }
        out
    }
}

fn label(run: &RunOutput) -> String {
    format!("{}_s{}", run.config.mode, run.config.seed)
}

fn check_runs(runs: &[RunOutput]) -> Result<usize> {
    let first = runs.first().ok_or_else(|| CflError::Report("no runs to report".into()))?;
    let n = first.records.len();
    let mut labels = HashSet::new();
    for r in runs {
        if r.records.len() != n {
            return Err(CflError::Report(format!("{} has {} rounds, {} has {}", label(first), n, label(r), r.records.len())));
        }
        if !labels.insert(label(r)) {
            return Err(CflError::Report(format!("run {} appears twice", label(r))));
        }
    }
    Ok(n)
}

fn round_column(n: usize) -> Vec<String> {
    (0..n).map(|t| t.to_string()).collect()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if c == 0 {
        f64::NAN
    } else {
        s / c as f64
    }
}

/// Per round: mean worker test accuracy and the accuracy at every quality level.
pub fn accuracy_table(runs: &[RunOutput]) -> Result<ReportTable> {
    let n = check_runs(runs)?;
    let mut t = ReportTable::new();
    t.push_column("round", round_column(n))?;
    for run in runs {
        let l = label(run);
        let m: Vec<f64> = run.records.iter().map(|r| mean(r.workers.iter().filter_map(|w| w.test_accuracy))).collect();
        t.push_numbers(format!("{}_mean", l), &m)?;
        let levels = run.records.first().map_or(0, |r| r.global_accuracy.len());
        for q in 0..levels {
            let v: Vec<f64> = run.records.iter().map(|r| r.global_accuracy[q]).collect();
            t.push_numbers(format!("{}_q{}", l, q), &v)?;
        }
    }
    Ok(t)
}

/// Per round: the round time of every run, plus `cfl / uniform-fl` for each
/// seed that has both.
pub fn time_table(runs: &[RunOutput]) -> Result<ReportTable> {
    let n = check_runs(runs)?;
    let mut t = ReportTable::new();
    t.push_column("round", round_column(n))?;
    for run in runs {
        let v: Vec<f64> = run.records.iter().map(|r| r.round_time_ms).collect();
        t.push_numbers(format!("{}_ms", label(run)), &v)?;
    }
    for cfl in runs.iter().filter(|r| r.config.mode == Mode::Cfl) {
        let seed = cfl.config.seed;
        if let Some(uni) = runs.iter().find(|r| r.config.mode == Mode::UniformFl && r.config.seed == seed) {
            let ratio: Vec<f64> =
                cfl.records.iter().zip(&uni.records).map(|(a, b)| a.round_time_ms / b.round_time_ms).collect();
            t.push_numbers(format!("time_ratio_s{}", seed), &ratio)?;
        }
    }
    Ok(t)
}

/// Per round: mean executed-layer fraction over participating workers.
pub fn computation_table(runs: &[RunOutput]) -> Result<ReportTable> {
    let n = check_runs(runs)?;
    let mut t = ReportTable::new();
    t.push_column("round", round_column(n))?;
    for run in runs {
        let v: Vec<f64> = run.records.iter().map(|r| mean(r.workers.iter().filter_map(|w| w.computation))).collect();
        t.push_numbers(label(run), &v)?;
    }
    Ok(t)
}

/// One row per run with accuracy and time spread across workers.
pub fn fairness_table(runs: &[RunOutput]) -> Result<ReportTable> {
    check_runs(runs)?;
    let mut t = ReportTable::new();
    let col = |f: &dyn Fn(&RunOutput) -> String| runs.iter().map(f).collect::<Vec<_>>();
    t.push_column("run", col(&label))?;
    t.push_column("mode", col(&|r| r.config.mode.to_string()))?;
    t.push_column("seed", col(&|r| r.config.seed.to_string()))?;
    t.push_column("acc_mean", col(&|r| r.summary.accuracy_fairness.mean.to_string()))?;
    t.push_column("acc_variance", col(&|r| r.summary.accuracy_fairness.variance.to_string()))?;
    t.push_column("acc_gap", col(&|r| r.summary.accuracy_fairness.gap.to_string()))?;
    t.push_column("time_mean_ms", col(&|r| r.summary.time_fairness.mean.to_string()))?;
    t.push_column("time_variance", col(&|r| r.summary.time_fairness.variance.to_string()))?;
    t.push_column("time_gap_ms", col(&|r| r.summary.time_fairness.gap.to_string()))?;
    Ok(t)
}

/// Writes `accuracy.csv`, `time.csv`, `computation.csv` and `fairness.csv`.
pub fn write_reports(dir: &Path, runs: &[RunOutput]) -> Result<Vec<String>> {
    let tables = [
        ("accuracy.csv", accuracy_table(runs)?),
        ("time.csv", time_table(runs)?),
        ("computation.csv", computation_table(runs)?),
        ("fairness.csv", fairness_table(runs)?),
    ];
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (name, table) in tables {
        fs::write(dir.join(name), table.to_csv())?;
        written.push(name.to_string());
    }
    Ok(written)
}
