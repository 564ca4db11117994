//! Experiment configuration: a versioned TOML schema with strict key
//! checking, plus the built-in schedule templates and defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use flexfed_core::client_runtime::ComparisonMetric;
use flexfed_core::har_stream::{
    ActivityMixTable, HarStreamError, ScheduleEntry, ScheduleTemplate,
};
use flexfed_core::server::WeightingMode;
use flexfed_core::strategies::{StrategyError, StrategyName, StrategySpec};
use flexfed_core::NUM_CLASSES;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unsupported schema_version {found}, expected {expected}")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("invalid field {field}: {reason}")]
    InvalidField { field: String, reason: String },
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    HarStream(#[from] HarStreamError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    /// Scale of random class means.
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
}

fn default_separation() -> f64 {
    1.0
}
fn default_noise_std() -> f64 {
    1.0
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            separation: default_separation(),
            noise_std: default_noise_std(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AvailabilityConfig {
    #[serde(default = "default_p")]
    pub p_connected: f64,
    #[serde(default = "default_p")]
    pub p_idle: f64,
    #[serde(default = "default_p")]
    pub p_powered: f64,
    #[serde(default)]
    pub diurnal_amplitude: f64,
}

fn default_p() -> f64 {
    0.9
}

impl Default for AvailabilityConfig {
    fn default() -> Self {
        Self {
            p_connected: default_p(),
            p_idle: default_p(),
            p_powered: default_p(),
            diurnal_amplitude: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineConfig {
    #[serde(default = "default_max_sessions")]
    pub max_sessions: usize,
    #[serde(default)]
    pub compute_budget: Option<usize>,
}

fn default_max_sessions() -> usize {
    1
}

/// Optional per-flag overrides for strategy ablations.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyFlagOverrides {
    pub offline_training: Option<bool>,
    pub adaptive_memory: Option<bool>,
    pub staleness_aggregation: Option<bool>,
    pub availability_aware_selection: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateConfig {
    pub group: String,
    pub entries: Vec<EntryConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryConfig {
    pub activity: String,
    /// Minutes since midnight.
    pub start: u32,
    #[serde(default)]
    pub start_variance: u32,
    pub duration: u32,
    #[serde(default)]
    pub duration_variance: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub strategy: String,
    pub clients: usize,
    pub rounds: usize,
    #[serde(default = "default_selection_fraction")]
    pub selection_fraction: f64,
    #[serde(default = "default_quorum_fraction")]
    pub quorum_fraction: f64,
    #[serde(default = "default_round_minutes")]
    pub round_minutes: u32,
    #[serde(default = "default_memory_capacity")]
    pub memory_capacity: usize,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default_window_len")]
    pub window_len: usize,
    #[serde(default = "default_window_stride")]
    pub window_stride: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    /// "sample" or "uniform".
    #[serde(default = "default_weighting")]
    pub weighting: String,
    /// "overall" or "macro": stored-model comparison metric.
    #[serde(default = "default_comparison")]
    pub comparison_metric: String,
    /// Long-run share below which a class counts as infrequent;
    /// defaults to 1/|C|.
    #[serde(default)]
    pub infrequent_threshold: Option<f64>,
    #[serde(default)]
    pub track_stored_accuracy: bool,
    /// Minimum test windows injected per class absent from the template day.
    #[serde(default = "default_min_test_windows")]
    pub min_test_windows_per_class: usize,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub availability: AvailabilityConfig,
    #[serde(default)]
    pub offline: OfflineConfig,
    #[serde(default)]
    pub strategy_flags: StrategyFlagOverrides,
    /// Directory of per-client trace files `client_<id>.csv`; overrides the
    /// parametric availability model.
    #[serde(default)]
    pub trace_dir: Option<PathBuf>,
    /// Optional delimited sensor file; replaces synthetic stream generation.
    #[serde(default)]
    pub dataset_file: Option<PathBuf>,
    /// Schedule templates, assigned to clients round-robin. Empty means the
    /// built-in set.
    #[serde(default)]
    pub templates: Vec<TemplateConfig>,
    /// Activity mix rows; empty means the built-in table.
    #[serde(default)]
    pub mix: BTreeMap<String, Vec<f64>>,
}

fn default_selection_fraction() -> f64 {
    0.25
}
fn default_quorum_fraction() -> f64 {
    0.3
}
fn default_round_minutes() -> u32 {
    300
}
fn default_memory_capacity() -> usize {
    200
}
fn default_local_epochs() -> usize {
    10
}
fn default_batch_size() -> usize {
    32
}
fn default_learning_rate() -> f64 {
    0.005
}
fn default_hidden_dim() -> usize {
    16
}
fn default_window_len() -> usize {
    8
}
fn default_window_stride() -> usize {
    4
}
fn default_channels() -> usize {
    3
}
fn default_weighting() -> String {
    "sample".to_owned()
}
fn default_comparison() -> String {
    "overall".to_owned()
}
fn default_min_test_windows() -> usize {
    5
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion {
                found: self.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        let field = |field: &str, reason: &str| ConfigError::InvalidField {
            field: field.to_owned(),
            reason: reason.to_owned(),
        };
        if self.clients == 0 {
            return Err(field("clients", "must be at least 1"));
        }
        if self.rounds == 0 {
            return Err(field("rounds", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.selection_fraction) {
            return Err(field("selection_fraction", "must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.quorum_fraction) {
            return Err(field("quorum_fraction", "must be in [0, 1]"));
        }
        if self.round_minutes == 0 {
            return Err(field("round_minutes", "must be positive"));
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(field("local_epochs/batch_size", "must be at least 1"));
        }
        if self.learning_rate <= 0.0 {
            return Err(field("learning_rate", "must be positive"));
        }
        if self.window_len == 0 || self.window_stride == 0 || self.channels == 0 {
            return Err(field("window_len/window_stride/channels", "must be at least 1"));
        }
        if let Some(t) = self.infrequent_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(field("infrequent_threshold", "must be in [0, 1]"));
            }
        }
        self.strategy_spec()?;
        self.weighting_mode()?;
        self.comparison()?;
        self.schedule_templates()?;
        self.mix_table()?;
        if let Some(dir) = &self.trace_dir {
            if !dir.is_dir() {
                return Err(field("trace_dir", "directory does not exist"));
            }
        }
        if let Some(f) = &self.dataset_file {
            if !f.is_file() {
                return Err(field("dataset_file", "file does not exist"));
            }
        }
        Ok(())
    }

    pub fn strategy_spec(&self) -> Result<StrategySpec, ConfigError> {
        let name = StrategyName::parse(&self.strategy)?;
        let mut spec = StrategySpec::preset(name);
        let o = &self.strategy_flags;
        if let Some(v) = o.offline_training {
            spec.offline_training = v;
        }
        if let Some(v) = o.adaptive_memory {
            spec.adaptive_memory = v;
        }
        if let Some(v) = o.staleness_aggregation {
            spec.staleness_aggregation = v;
        }
        if let Some(v) = o.availability_aware_selection {
            spec.availability_aware_selection = v;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn weighting_mode(&self) -> Result<WeightingMode, ConfigError> {
        match self.weighting.as_str() {
            "sample" => Ok(WeightingMode::SampleCount),
            "uniform" => Ok(WeightingMode::Uniform),
            other => Err(ConfigError::InvalidField {
                field: "weighting".to_owned(),
                reason: format!("expected \"sample\" or \"uniform\", found {other:?}"),
            }),
        }
    }

    pub fn comparison(&self) -> Result<ComparisonMetric, ConfigError> {
        match self.comparison_metric.as_str() {
            "overall" => Ok(ComparisonMetric::OverallAccuracy),
            "macro" => Ok(ComparisonMetric::MacroAccuracy),
            other => Err(ConfigError::InvalidField {
                field: "comparison_metric".to_owned(),
                reason: format!("expected \"overall\" or \"macro\", found {other:?}"),
            }),
        }
    }

    pub fn schedule_templates(&self) -> Result<Vec<ScheduleTemplate>, ConfigError> {
        if self.templates.is_empty() {
            return Ok(builtin_templates());
        }
        self.templates
            .iter()
            .map(|t| {
                let entries = t
                    .entries
                    .iter()
                    .map(|e| ScheduleEntry {
                        activity: e.activity.clone(),
                        start: e.start,
                        start_variance: e.start_variance,
                        duration: e.duration,
                        duration_variance: e.duration_variance,
                    })
                    .collect();
                ScheduleTemplate::new(&t.group, entries).map_err(ConfigError::from)
            })
            .collect()
    }

    pub fn mix_table(&self) -> Result<ActivityMixTable, ConfigError> {
        if self.mix.is_empty() {
            return Ok(ActivityMixTable::default_table());
        }
        let mut rows = BTreeMap::new();
        for (activity, weights) in &self.mix {
            if weights.len() != NUM_CLASSES {
                return Err(ConfigError::InvalidField {
                    field: format!("mix.{activity}"),
                    reason: format!("expected {NUM_CLASSES} weights, found {}", weights.len()),
                });
            }
            let mut row = [0.0; NUM_CLASSES];
            row.copy_from_slice(weights);
            rows.insert(activity.clone(), row);
        }
        Ok(ActivityMixTable::new(rows)?)
    }

    pub fn input_dim(&self) -> usize {
        self.window_len * self.channels
    }
}

fn entry(activity: &str, start: u32, sv: u32, dur: u32, dv: u32) -> ScheduleEntry {
    ScheduleEntry {
        activity: activity.to_owned(),
        start,
        start_variance: sv,
        duration: dur,
        duration_variance: dv,
    }
}

/// Built-in daily routines for three client groups. Every group produces the
/// frequent sedentary labels; stairs labels come only from Work, At School
/// and Workout blocks, and Jogging only from At Park and Workout.
pub fn builtin_templates() -> Vec<ScheduleTemplate> {
    let worker = ScheduleTemplate::new(
        "worker",
        vec![
            entry("Shower", 420, 20, 30, 5),
            entry("Breakfast", 450, 15, 20, 5),
            entry("Transportation", 480, 30, 60, 25),
            entry("Work", 540, 0, 240, 5),
            entry("Lunch", 780, 30, 30, 10),
            entry("Work", 810, 0, 90, 30),
            entry("Workout", 990, 15, 60, 20),
            entry("Dinner", 1080, 20, 45, 15),
            entry("Watch TV", 1140, 15, 90, 25),
        ],
    )
    .expect("built-in worker template");
    let student = ScheduleTemplate::new(
        "student",
        vec![
            entry("Shower", 450, 20, 30, 5),
            entry("Breakfast", 480, 15, 20, 5),
            entry("Transportation", 510, 20, 45, 15),
            entry("At School", 555, 0, 300, 10),
            entry("Lunch", 750, 30, 30, 10),
            entry("At Park", 900, 30, 90, 30),
            entry("Study", 1020, 30, 120, 30),
            entry("Dinner", 1170, 20, 45, 15),
        ],
    )
    .expect("built-in student template");
    let homebody = ScheduleTemplate::new(
        "homebody",
        vec![
            entry("Breakfast", 480, 30, 30, 10),
            entry("Watch TV", 540, 30, 120, 30),
            entry("Workout", 690, 30, 60, 20),
            entry("Lunch", 780, 30, 40, 10),
            entry("Study", 840, 30, 120, 40),
            entry("At Park", 990, 30, 60, 30),
            entry("Dinner", 1110, 30, 45, 15),
            entry("Watch TV", 1200, 30, 120, 40),
        ],
    )
    .expect("built-in homebody template");
    vec![worker, student, homebody]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(
            r#"
schema_version = 1
strategy = "flexfed"
clients = 4
rounds = 5
master_seed = 1
output_dir = "/tmp/out"
"#,
        )
        .unwrap();
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.learning_rate, 0.005);
        assert_eq!(cfg.input_dim(), 24);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = ExperimentConfig::from_toml(
            r#"
schema_version = 1
strategy = "flexfed"
clients = 4
rounds = 5
master_seed = 1
output_dir = "/tmp/out"
learning_rte = 0.1
"#,
        );
        assert!(matches!(err, Err(ConfigError::Parse(_))));
    }

    #[test]
    fn schema_version_is_checked() {
        let err = ExperimentConfig::from_toml(
            r#"
schema_version = 99
strategy = "flexfed"
clients = 4
rounds = 5
master_seed = 1
output_dir = "/tmp/out"
"#,
        );
        assert!(matches!(err, Err(ConfigError::SchemaVersion { found: 99, .. })));
    }

    #[test]
    fn builtin_templates_cover_all_mix_activities() {
        let mix = ActivityMixTable::default_table();
        for t in builtin_templates() {
            for e in &t.entries {
                assert!(mix.row(&e.activity).is_some(), "missing row {}", e.activity);
            }
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::from_toml(
            r#"
schema_version = 1
strategy = "mifa"
clients = 3
rounds = 2
master_seed = 7
output_dir = "/tmp/x"
weighting = "uniform"
"#,
        )
        .unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again.strategy, "mifa");
        assert_eq!(again.master_seed, 7);
    }
}
