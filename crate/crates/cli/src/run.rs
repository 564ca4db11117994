//! Run orchestration: executes all rounds of one experiment and emits
//! `rounds.csv`, `summary.json` and a resolved-config snapshot.
//!
//! `rounds.csv` contains only seed-determined values so identical configs
//! produce byte-identical files; wall-clock time goes to `summary.json`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use flexfed_core::server::{RoundRecord, ServerError, Simulation};
use flexfed_core::CLASS_NAMES;

use crate::build::{build_simulation, BuildError};
use crate::config::{ConfigError, ExperimentConfig, SCHEMA_VERSION};

/// Environment variable that overrides the config's output directory.
pub const OUTPUT_DIR_ENV: &str = "FLEXFED_OUTPUT_DIR";

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_SNAPSHOT_FILE: &str = "config.resolved.toml";
pub const STORED_ACCURACY_FILE: &str = "stored_accuracy.csv";

/// Rounds entering the tail-forgetting average in the summary.
pub const TAIL_ROUNDS: usize = 20;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Per-run aggregate results, serialized to `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub strategy: String,
    pub master_seed: u64,
    pub clients: usize,
    pub rounds: usize,
    pub cancelled_rounds: usize,
    pub final_overall_accuracy: f64,
    pub final_macro_accuracy: f64,
    pub final_per_class_accuracy: Vec<f64>,
    /// Backward transfer at the final round; 0 for runs of a single round.
    pub bwt_final: f64,
    pub mean_abs_forgetting: f64,
    /// Mean |F^r| over the last `tail_rounds` rounds.
    pub mean_abs_forgetting_tail: f64,
    pub tail_rounds: usize,
    /// Fraction of round transitions where mean test loss increased; proxy
    /// for per-client loss-regression monitoring.
    pub loss_regression_fraction: f64,
    pub offline_sessions: u64,
    pub alpha_updates: u64,
    pub store_contributions: u64,
    pub partial_failures: usize,
    pub wall_ms: u128,
}

/// Everything one run produced, for in-process consumers (tests, compare).
pub struct RunArtifacts {
    pub records: Vec<RoundRecord>,
    pub summary: RunSummary,
    /// `[client][round]` stored-model accuracies when tracking was enabled.
    pub stored_accuracy: Vec<Vec<f64>>,
    pub output_dir: PathBuf,
}

/// Output directory after applying the environment override.
pub fn resolve_output_dir(cfg: &ExperimentConfig) -> PathBuf {
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => cfg.output_dir.clone(),
    }
}

/// Runs all rounds and writes result files into the resolved output dir.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts, RunError> {
    let out_dir = resolve_output_dir(cfg);
    run_experiment_into(cfg, &out_dir)
}

/// Like [`run_experiment`] with an explicit output directory (no env lookup).
pub fn run_experiment_into(
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<RunArtifacts, RunError> {
    cfg.validate()?;
    let started = Instant::now();
    let mut sim = build_simulation(cfg)?;
    let mut records = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        records.push(sim.run_round()?);
    }
    let summary = summarize(cfg, &sim, &records, started.elapsed().as_millis());

    write_file(&out_dir.join(ROUNDS_FILE), &render_rounds_csv(&records))?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&out_dir.join(SUMMARY_FILE), &(json + "\n"))?;
    write_file(&out_dir.join(CONFIG_SNAPSHOT_FILE), &cfg.to_toml())?;
    if cfg.track_stored_accuracy {
        write_file(
            &out_dir.join(STORED_ACCURACY_FILE),
            &render_stored_accuracy(&sim.stored_accuracy),
        )?;
    }

    Ok(RunArtifacts {
        records,
        summary,
        stored_accuracy: sim.stored_accuracy,
        output_dir: out_dir.to_path_buf(),
    })
}

fn summarize(
    cfg: &ExperimentConfig,
    sim: &Simulation<f64>,
    records: &[RoundRecord],
    wall_ms: u128,
) -> RunSummary {
    let last = records.last().expect("at least one round");
    let tail = TAIL_ROUNDS.min(records.len());
    let mean_abs = |rs: &[RoundRecord]| {
        rs.iter().map(|r| r.forgetting.abs()).sum::<f64>() / rs.len() as f64
    };
    let regressions = records
        .windows(2)
        .filter(|w| flexfed_core::metrics::cf_flag(w[0].mean_loss, w[1].mean_loss))
        .count();
    let transitions = records.len().saturating_sub(1);
    let final_macro =
        last.per_class_accuracy.iter().sum::<f64>() / last.per_class_accuracy.len() as f64;
    RunSummary {
        schema_version: SCHEMA_VERSION,
        strategy: cfg.strategy.clone(),
        master_seed: cfg.master_seed,
        clients: cfg.clients,
        rounds: records.len(),
        cancelled_rounds: records.iter().filter(|r| r.cancelled).count(),
        final_overall_accuracy: last.overall_accuracy,
        final_macro_accuracy: final_macro,
        final_per_class_accuracy: last.per_class_accuracy.clone(),
        bwt_final: sim.history.bwt_final().unwrap_or(0.0),
        mean_abs_forgetting: mean_abs(records),
        mean_abs_forgetting_tail: mean_abs(&records[records.len() - tail..]),
        tail_rounds: tail,
        loss_regression_fraction: if transitions == 0 {
            0.0
        } else {
            regressions as f64 / transitions as f64
        },
        offline_sessions: sim.counters.offline_sessions,
        alpha_updates: sim.counters.alpha_updates,
        store_contributions: sim.counters.store_contributions,
        partial_failures: records.iter().map(|r| r.errors.len()).sum(),
        wall_ms,
    }
}

/// CSV header, kept in RoundRecord field order (wall clock excluded for
/// byte-stable output).
pub fn rounds_csv_header() -> String {
    let mut cols = vec![
        "round".to_owned(),
        "cancelled".to_owned(),
        "selected".to_owned(),
        "participants".to_owned(),
        "staleness".to_owned(),
        "overall_accuracy".to_owned(),
    ];
    for name in CLASS_NAMES {
        cols.push(format!("acc_{}", name.to_ascii_lowercase()));
    }
    cols.push("forgetting".to_owned());
    for name in CLASS_NAMES {
        cols.push(format!("f_{}", name.to_ascii_lowercase()));
    }
    cols.push("mean_loss".to_owned());
    cols.push("errors".to_owned());
    cols.join(",")
}

pub fn render_rounds_csv(records: &[RoundRecord]) -> String {
    let mut out = rounds_csv_header();
    out.push('\n');
    for r in records {
        let selected = join_semicolon(r.selected.iter());
        let staleness = join_semicolon(r.staleness.iter());
        let errors = r.errors.join(";").replace(',', " ");
        let mut row = vec![
            r.round.to_string(),
            u8::from(r.cancelled).to_string(),
            selected,
            r.participant_count.to_string(),
            staleness,
            r.overall_accuracy.to_string(),
        ];
        row.extend(r.per_class_accuracy.iter().map(f64::to_string));
        row.push(r.forgetting.to_string());
        row.extend(r.per_class_forgetting.iter().map(f64::to_string));
        row.push(r.mean_loss.to_string());
        row.push(errors);
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn join_semicolon<T: ToString>(items: impl Iterator<Item = T>) -> String {
    items
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

fn render_stored_accuracy(stored: &[Vec<f64>]) -> String {
    let mut out = String::from("client,round,stored_accuracy\n");
    for (client, series) in stored.iter().enumerate() {
        for (round, acc) in series.iter().enumerate() {
            out.push_str(&format!("{client},{round},{acc}\n"));
        }
    }
    out
}

fn write_file(path: &Path, content: &str) -> Result<(), RunError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| RunError::Io {
            path: parent.display().to_string(),
            source,
        })?;
    }
    std::fs::write(path, content).map_err(|source| RunError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parsed view of a rounds.csv, column-addressable by header name.
pub struct RoundsTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Debug, Error)]
pub enum TableError {
    #[error("missing result file {0}")]
    Missing(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed rounds table: {0}")]
    Malformed(String),
}

impl RoundsTable {
    pub fn load(path: &Path) -> Result<Self, TableError> {
        if !path.is_file() {
            return Err(TableError::Missing(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path).map_err(|source| TableError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| TableError::Malformed("empty file".into()))?
            .split(',')
            .map(str::to_owned)
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row: Vec<String> = line.split(',').map(str::to_owned).collect();
            if row.len() != header.len() {
                return Err(TableError::Malformed(format!(
                    "row {} has {} fields, header has {}",
                    i + 2,
                    row.len(),
                    header.len()
                )));
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>, TableError> {
        let idx = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| TableError::Malformed(format!("no column {name:?}")))?;
        self.rows
            .iter()
            .map(|r| {
                r[idx]
                    .parse()
                    .map_err(|_| TableError::Malformed(format!("bad value {:?} in {name}", r[idx])))
            })
            .collect()
    }
}
