//! Cross-run comparison: groups result directories by strategy and emits
//! per-round mean and population standard deviation of accuracy and |F^r|
//! as plot-ready CSV files, plus a JSON summary table.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::run::{RoundsTable, RunSummary, TableError, ROUNDS_FILE, SUMMARY_FILE};

pub const ACCURACY_PLOT_FILE: &str = "accuracy_by_round.csv";
pub const FORGETTING_PLOT_FILE: &str = "forgetting_by_round.csv";
pub const COMPARE_SUMMARY_FILE: &str = "compare_summary.json";

#[derive(Debug, Error)]
pub enum CompareError {
    #[error("need at least 2 result directories, got {0}")]
    TooFewRuns(usize),
    #[error("missing {file} in {dir}")]
    MissingFile { dir: String, file: String },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad summary in {dir}: {message}")]
    BadSummary { dir: String, message: String },
    #[error("schema mismatch in {dir}: {message}")]
    SchemaMismatch { dir: String, message: String },
    #[error(transparent)]
    Table(#[from] TableError),
}

struct LoadedRun {
    summary: RunSummary,
    accuracy: Vec<f64>,
    abs_forgetting: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StrategyAggregate {
    pub strategy: String,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub final_overall_accuracy_mean: f64,
    pub final_overall_accuracy_std: f64,
    pub final_macro_accuracy_mean: f64,
    pub mean_abs_forgetting_tail_mean: f64,
    pub mean_abs_forgetting_tail_std: f64,
    pub final_per_class_accuracy_mean: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct CompareReport {
    pub rounds: usize,
    pub strategies: Vec<StrategyAggregate>,
}

fn load_run(dir: &Path) -> Result<LoadedRun, CompareError> {
    let summary_path = dir.join(SUMMARY_FILE);
    if !summary_path.is_file() {
        return Err(CompareError::MissingFile {
            dir: dir.display().to_string(),
            file: SUMMARY_FILE.to_owned(),
        });
    }
    let text = std::fs::read_to_string(&summary_path).map_err(|source| CompareError::Io {
        path: summary_path.display().to_string(),
        source,
    })?;
    let summary: RunSummary =
        serde_json::from_str(&text).map_err(|e| CompareError::BadSummary {
            dir: dir.display().to_string(),
            message: e.to_string(),
        })?;
    let rounds_path = dir.join(ROUNDS_FILE);
    if !rounds_path.is_file() {
        return Err(CompareError::MissingFile {
            dir: dir.display().to_string(),
            file: ROUNDS_FILE.to_owned(),
        });
    }
    let table = RoundsTable::load(&rounds_path)?;
    let accuracy = table.column("overall_accuracy")?;
    let abs_forgetting: Vec<f64> = table
        .column("forgetting")?
        .into_iter()
        .map(f64::abs)
        .collect();
    Ok(LoadedRun {
        summary,
        accuracy,
        abs_forgetting,
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation (divide by n, not n-1): the seeds compared
/// are the whole set of runs, not a sample.
fn pop_std(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Compares result directories and writes plot data + summary into `out_dir`.
pub fn compare_runs(run_dirs: &[PathBuf], out_dir: &Path) -> Result<CompareReport, CompareError> {
    if run_dirs.len() < 2 {
        return Err(CompareError::TooFewRuns(run_dirs.len()));
    }
    let mut by_strategy: BTreeMap<String, Vec<LoadedRun>> = BTreeMap::new();
    let mut rounds: Option<usize> = None;
    let mut schema: Option<u32> = None;
    for dir in run_dirs {
        let run = load_run(dir)?;
        let mismatch = |message: String| CompareError::SchemaMismatch {
            dir: dir.display().to_string(),
            message,
        };
        match schema {
            None => schema = Some(run.summary.schema_version),
            Some(v) if v != run.summary.schema_version => {
                return Err(mismatch(format!(
                    "schema_version {} vs {v}",
                    run.summary.schema_version
                )))
            }
            _ => {}
        }
        match rounds {
            None => rounds = Some(run.accuracy.len()),
            Some(n) if n != run.accuracy.len() => {
                return Err(mismatch(format!(
                    "{} rounds vs {n} in earlier runs",
                    run.accuracy.len()
                )))
            }
            _ => {}
        }
        by_strategy
            .entry(run.summary.strategy.clone())
            .or_default()
            .push(run);
    }
    let rounds = rounds.expect("at least two runs loaded");

    std::fs::create_dir_all(out_dir).map_err(|source| CompareError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    write_plot(
        &out_dir.join(ACCURACY_PLOT_FILE),
        &by_strategy,
        rounds,
        |run| &run.accuracy,
    )?;
    write_plot(
        &out_dir.join(FORGETTING_PLOT_FILE),
        &by_strategy,
        rounds,
        |run| &run.abs_forgetting,
    )?;

    let strategies = by_strategy
        .iter()
        .map(|(name, runs)| {
            let finals: Vec<f64> = runs
                .iter()
                .map(|r| r.summary.final_overall_accuracy)
                .collect();
            let tails: Vec<f64> = runs
                .iter()
                .map(|r| r.summary.mean_abs_forgetting_tail)
                .collect();
            let macros: Vec<f64> =
                runs.iter().map(|r| r.summary.final_macro_accuracy).collect();
            let classes = runs[0].summary.final_per_class_accuracy.len();
            let per_class_mean = (0..classes)
                .map(|c| {
                    mean(
                        &runs
                            .iter()
                            .map(|r| r.summary.final_per_class_accuracy[c])
                            .collect::<Vec<_>>(),
                    )
                })
                .collect();
            StrategyAggregate {
                strategy: name.clone(),
                runs: runs.len(),
                seeds: runs.iter().map(|r| r.summary.master_seed).collect(),
                final_overall_accuracy_mean: mean(&finals),
                final_overall_accuracy_std: pop_std(&finals),
                final_macro_accuracy_mean: mean(&macros),
                mean_abs_forgetting_tail_mean: mean(&tails),
                mean_abs_forgetting_tail_std: pop_std(&tails),
                final_per_class_accuracy_mean: per_class_mean,
            }
        })
        .collect();
    let report = CompareReport { rounds, strategies };

    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    let path = out_dir.join(COMPARE_SUMMARY_FILE);
    std::fs::write(&path, json + "\n").map_err(|source| CompareError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(report)
}

fn write_plot(
    path: &Path,
    by_strategy: &BTreeMap<String, Vec<LoadedRun>>,
    rounds: usize,
    series: impl Fn(&LoadedRun) -> &Vec<f64>,
) -> Result<(), CompareError> {
    let mut header = vec!["round".to_owned()];
    for name in by_strategy.keys() {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_std"));
    }
    let mut out = header.join(",");
    out.push('\n');
    for r in 0..rounds {
        let mut row = vec![r.to_string()];
        for runs in by_strategy.values() {
            let vals: Vec<f64> = runs.iter().map(|run| series(run)[r]).collect();
            row.push(mean(&vals).to_string());
            row.push(pop_std(&vals).to_string());
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| CompareError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::run::run_experiment_into;

    fn run_once(dir: &Path, strategy: &str, seed: u64) {
        let cfg = ExperimentConfig::from_toml(&format!(
            r#"
schema_version = 1
strategy = "{strategy}"
clients = 3
rounds = 3
memory_capacity = 30
local_epochs = 1
batch_size = 16
master_seed = {seed}
output_dir = "{}"

[availability]
p_connected = 1.0
p_idle = 1.0
p_powered = 1.0
"#,
            dir.display()
        ))
        .unwrap();
        run_experiment_into(&cfg, dir).unwrap();
    }

    #[test]
    fn self_comparison_has_zero_std() {
        let tmp = tempfile::tempdir().unwrap();
        let a = tmp.path().join("a");
        run_once(&a, "fedavg", 1);
        let out = tmp.path().join("cmp");
        let report = compare_runs(&[a.clone(), a.clone()], &out).unwrap();
        assert_eq!(report.strategies.len(), 1);
        assert_eq!(report.strategies[0].final_overall_accuracy_std, 0.0);
        let table = RoundsTable::load(&out.join(ACCURACY_PLOT_FILE)).unwrap();
        assert!(table.column("fedavg_std").unwrap().iter().all(|v| *v == 0.0));
        assert!(out.join(FORGETTING_PLOT_FILE).is_file());
    }

    #[test]
    fn groups_strategies_and_computes_population_std() {
        let tmp = tempfile::tempdir().unwrap();
        let mut dirs = Vec::new();
        for (s, seed) in [("fedavg", 1), ("fedavg", 2), ("refl", 1)] {
            let d = tmp.path().join(format!("{s}-{seed}"));
            run_once(&d, s, seed);
            dirs.push(d);
        }
        let out = tmp.path().join("cmp");
        let report = compare_runs(&dirs, &out).unwrap();
        assert_eq!(report.strategies.len(), 2);
        let fedavg = &report.strategies[0];
        assert_eq!(fedavg.runs, 2);
        // population std over {a, b} is |a-b|/2
        let runs: Vec<f64> = dirs[..2]
            .iter()
            .map(|d| {
                let text = std::fs::read_to_string(d.join(SUMMARY_FILE)).unwrap();
                serde_json::from_str::<RunSummary>(&text)
                    .unwrap()
                    .final_overall_accuracy
            })
            .collect();
        let expected = (runs[0] - runs[1]).abs() / 2.0;
        assert!((fedavg.final_overall_accuracy_std - expected).abs() < 1e-12);
    }

    #[test]
    fn missing_and_mismatched_inputs_error() {
        let tmp = tempfile::tempdir().unwrap();
        let a = tmp.path().join("a");
        run_once(&a, "fedavg", 1);
        let ghost = tmp.path().join("ghost");
        let out = tmp.path().join("cmp");
        assert!(matches!(
            compare_runs(&[a.clone()], &out),
            Err(CompareError::TooFewRuns(1))
        ));
        assert!(matches!(
            compare_runs(&[a.clone(), ghost], &out),
            Err(CompareError::MissingFile { .. })
        ));
    }
}
