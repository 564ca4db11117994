//! `gen-traces`: pre-generates per-client availability trace files from a
//! profile config, for runs that want fixed traces instead of the parametric
//! model.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use flexfed_core::availability::{
    generate_trace, trace_to_string, AvailabilityError, AvailabilityProfile,
};
use flexfed_core::seeding::derive_seed;

use crate::build::trace_file_name;
use crate::config::AvailabilityConfig;

#[derive(Debug, Error)]
pub enum TracesError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("profile config parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Availability(#[from] AvailabilityError),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TracesConfig {
    pub clients: usize,
    pub rounds: usize,
    #[serde(default = "default_round_minutes")]
    pub round_minutes: u32,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub availability: AvailabilityConfig,
}

fn default_round_minutes() -> u32 {
    300
}

impl TracesConfig {
    pub fn from_path(path: &Path) -> Result<Self, TracesError> {
        let text = std::fs::read_to_string(path).map_err(|source| TracesError::Io {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| TracesError::Parse(e.to_string()))
    }
}

/// Writes `client_<k>.csv` for every client into the configured directory and
/// returns the written paths.
pub fn generate_traces(cfg: &TracesConfig) -> Result<Vec<PathBuf>, TracesError> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(|source| TracesError::Io {
        path: cfg.output_dir.display().to_string(),
        source,
    })?;
    let mut written = Vec::with_capacity(cfg.clients);
    for k in 0..cfg.clients as u64 {
        let profile = AvailabilityProfile {
            p_connected: cfg.availability.p_connected,
            p_idle: cfg.availability.p_idle,
            p_powered: cfg.availability.p_powered,
            diurnal_amplitude: cfg.availability.diurnal_amplitude,
            seed: derive_seed(cfg.master_seed, "availability", k),
        };
        let trace = generate_trace(&profile, cfg.rounds, cfg.round_minutes)?;
        let path = cfg.output_dir.join(trace_file_name(k));
        std::fs::write(&path, trace_to_string(&trace)).map_err(|source| TracesError::Io {
            path: path.display().to_string(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use flexfed_core::availability::load_trace;

    #[test]
    fn generated_traces_match_the_parametric_model() {
        let tmp = tempfile::tempdir().unwrap();
        let trace_dir = tmp.path().join("traces");
        let cfg: TracesConfig = toml::from_str(&format!(
            r#"
clients = 3
rounds = 8
master_seed = 9
output_dir = "{}"

[availability]
p_connected = 0.5
"#,
            trace_dir.display()
        ))
        .unwrap();
        let paths = generate_traces(&cfg).unwrap();
        assert_eq!(paths.len(), 3);

        // A run reading these traces sees exactly what the parametric path
        // would have generated with the same master seed.
        let exp = ExperimentConfig::from_toml(&format!(
            r#"
schema_version = 1
strategy = "fedavg"
clients = 3
rounds = 8
master_seed = 9
output_dir = "/tmp/unused"
trace_dir = "{}"

[availability]
p_connected = 0.5
"#,
            trace_dir.display()
        ))
        .unwrap();
        let sim = crate::build::build_simulation(&exp).unwrap();
        for (k, c) in sim.clients.iter().enumerate() {
            let on_disk = load_trace(&paths[k]).unwrap();
            assert_eq!(c.trace, on_disk);
        }
    }
}
