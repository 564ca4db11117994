//! Built-in experiment presets. These are desk-scale setups: "paper-desk"
//! shrinks the reference configuration (hundreds of clients and rounds) to a
//! few minutes of runtime while keeping the availability and memory
//! stressors.

use std::path::Path;

use crate::config::ExperimentConfig;

pub struct PresetInfo {
    pub name: &'static str,
    pub description: &'static str,
}

pub const PRESETS: [PresetInfo; 2] = [
    PresetInfo {
        name: "smoke",
        description: "4 clients, 5 rounds; fast end-to-end sanity run",
    },
    PresetInfo {
        name: "paper-desk",
        description: "20 clients, 60 rounds, m=200, tau=0.25, beta=0.3, \
                      p_connected=0.5; desk-scale strategy comparison",
    },
];

/// Builds a preset config. `strategy` is one of fedavg/refl/mifa/flexfed.
pub fn preset(
    name: &str,
    strategy: &str,
    master_seed: u64,
    output_dir: &Path,
) -> Option<ExperimentConfig> {
    let toml = match name {
        "smoke" => smoke_toml(strategy, master_seed, output_dir),
        "paper-desk" => paper_desk_toml(strategy, master_seed, output_dir),
        _ => return None,
    };
    Some(ExperimentConfig::from_toml(&toml).expect("preset configs are valid"))
}

fn smoke_toml(strategy: &str, seed: u64, out: &Path) -> String {
    format!(
        r#"
schema_version = 1
strategy = "{strategy}"
clients = 4
rounds = 5
selection_fraction = 0.5
quorum_fraction = 0.25
memory_capacity = 60
local_epochs = 2
batch_size = 16
learning_rate = 0.05
master_seed = {seed}
output_dir = "{out}"

[features]
separation = 1.5

[availability]
p_connected = 0.9
p_idle = 0.95
p_powered = 0.95
"#,
        out = out.display()
    )
}

fn paper_desk_toml(strategy: &str, seed: u64, out: &Path) -> String {
    format!(
        r#"
schema_version = 1
strategy = "{strategy}"
clients = 20
rounds = 60
selection_fraction = 0.25
quorum_fraction = 0.3
round_minutes = 300
memory_capacity = 200
local_epochs = 10
batch_size = 32
learning_rate = 0.01
master_seed = {seed}
output_dir = "{out}"

[features]
separation = 0.35
noise_std = 1.0

[availability]
p_connected = 0.5
p_idle = 0.9
p_powered = 0.9
diurnal_amplitude = 0.3
"#,
        out = out.display()
    )
}
