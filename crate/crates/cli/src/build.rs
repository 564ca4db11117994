//! Turns an [`ExperimentConfig`] into a ready-to-run [`Simulation`]: client
//! streams, local test sets, availability traces and the initial global
//! model, all derived from the master seed.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use flexfed_core::availability::{
    generate_trace, load_trace, AvailabilityError, AvailabilityProfile, AvailabilityTrace,
};
use flexfed_core::client_runtime::{ClientState, OfflinePolicy};
use flexfed_core::har_stream::{
    convert_to_labels, ingest_external, majority_label, num_segments, sample_schedule,
    ActivityMixTable, ClassFeatureModel, HarStreamError, LabeledMinute, LabeledWindow,
    ScheduleTemplate, MINUTES_PER_DAY,
};
use flexfed_core::learner::{init_params, LearnerError, ModelShape, TrainConfig};
use flexfed_core::seeding::{derive_seed, rng_for};
use flexfed_core::server::{EngineConfig, Simulation};
use flexfed_core::strategies::{make_strategy, StrategyError};
use flexfed_core::NUM_CLASSES;

use crate::config::{ConfigError, ExperimentConfig};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    HarStream(#[from] HarStreamError),
    #[error(transparent)]
    Availability(#[from] AvailabilityError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error("dataset file provides {found} users, config needs {needed} clients")]
    NotEnoughUsers { found: usize, needed: usize },
}

/// Builds the full simulation state for one run.
pub fn build_simulation(cfg: &ExperimentConfig) -> Result<Simulation<f64>, BuildError> {
    cfg.validate()?;
    let spec = cfg.strategy_spec()?;
    let strategy = make_strategy(spec)?;
    let shape = ModelShape {
        input: cfg.input_dim(),
        hidden: cfg.hidden_dim,
        classes: NUM_CLASSES,
    };
    let global = init_params(shape, derive_seed(cfg.master_seed, "global-init", 0))?;

    let feat = ClassFeatureModel::<f64>::random(
        NUM_CLASSES,
        cfg.input_dim(),
        cfg.features.separation,
        cfg.features.noise_std,
        derive_seed(cfg.master_seed, "features", 0),
    )?;

    let mut clients = Vec::with_capacity(cfg.clients);
    match &cfg.dataset_file {
        Some(path) => {
            let streams: Vec<(String, Vec<LabeledWindow<f64>>)> =
                ingest_external(path, cfg.window_len, cfg.window_stride)?;
            if streams.len() < cfg.clients {
                return Err(BuildError::NotEnoughUsers {
                    found: streams.len(),
                    needed: cfg.clients,
                });
            }
            for (k, (_, windows)) in streams.into_iter().take(cfg.clients).enumerate() {
                let (stream, test_set) = split_external(windows, k as u64);
                clients.push(make_client(cfg, k as u64, stream, test_set)?);
            }
        }
        None => {
            let templates = cfg.schedule_templates()?;
            let mix = cfg.mix_table()?;
            for k in 0..cfg.clients as u64 {
                let template = &templates[k as usize % templates.len()];
                let stream = synth_stream(cfg, template, &mix, &feat, k)?;
                let test_set = synth_test_set(cfg, template, &mix, &feat, k)?;
                clients.push(make_client(cfg, k, stream, test_set)?);
            }
        }
    }

    let engine = EngineConfig {
        selection_fraction: cfg.selection_fraction,
        quorum_fraction: cfg.quorum_fraction,
        round_minutes: cfg.round_minutes,
        train: TrainConfig {
            epochs: cfg.local_epochs,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            seed: 0, // overridden per client/round
        },
        weighting: cfg.weighting_mode()?,
        offline_policy: OfflinePolicy {
            max_sessions: cfg.offline.max_sessions,
            compute_budget: cfg.offline.compute_budget,
        },
        master_seed: cfg.master_seed,
        track_stored_accuracy: cfg.track_stored_accuracy,
    };

    Ok(Simulation::new(clients, global, strategy, engine, NUM_CLASSES))
}

fn make_client(
    cfg: &ExperimentConfig,
    k: u64,
    stream: Vec<LabeledWindow<f64>>,
    test_set: Vec<LabeledWindow<f64>>,
) -> Result<ClientState<f64>, BuildError> {
    let shape = ModelShape {
        input: cfg.input_dim(),
        hidden: cfg.hidden_dim,
        classes: NUM_CLASSES,
    };
    let theta_init = init_params(shape, derive_seed(cfg.master_seed, "global-init", 0))?;
    let trace = client_trace(cfg, k)?;
    let mut client = ClientState::new(
        k,
        cfg.memory_capacity,
        theta_init,
        test_set,
        trace,
        stream,
        NUM_CLASSES,
        derive_seed(cfg.master_seed, "client", k),
    );
    client.comparison_metric = cfg.comparison()?;
    if let Some(t) = cfg.infrequent_threshold {
        client.infrequent_threshold = t;
    }
    Ok(client)
}

fn client_trace(cfg: &ExperimentConfig, k: u64) -> Result<AvailabilityTrace, BuildError> {
    match &cfg.trace_dir {
        Some(dir) => {
            let path = dir.join(trace_file_name(k));
            Ok(load_trace(&path)?)
        }
        None => {
            let profile = AvailabilityProfile {
                p_connected: cfg.availability.p_connected,
                p_idle: cfg.availability.p_idle,
                p_powered: cfg.availability.p_powered,
                diurnal_amplitude: cfg.availability.diurnal_amplitude,
                seed: derive_seed(cfg.master_seed, "availability", k),
            };
            Ok(generate_trace(&profile, cfg.rounds, cfg.round_minutes)?)
        }
    }
}

pub fn trace_file_name(client: u64) -> String {
    format!("client_{client}.csv")
}

/// Multi-day label timeline for one client; minutes are global (day offset
/// folded in) so round windows line up with wall time.
fn client_timeline(
    cfg: &ExperimentConfig,
    template: &ScheduleTemplate,
    mix: &ActivityMixTable,
    k: u64,
) -> Result<Vec<LabeledMinute>, HarStreamError> {
    let total_minutes = cfg.rounds as u64 * u64::from(cfg.round_minutes);
    let days = total_minutes.div_ceil(u64::from(MINUTES_PER_DAY)) as u32 + 1;
    let schedule_seed = derive_seed(cfg.master_seed, "schedule", k);
    let label_seed = derive_seed(cfg.master_seed, "labels", k);
    let mut timeline = Vec::new();
    for day in 0..days {
        let schedule = sample_schedule(template, day, schedule_seed);
        let day_labels =
            convert_to_labels(&schedule, mix, derive_seed(label_seed, "day", u64::from(day)))?;
        timeline.extend(day_labels.into_iter().map(|m| LabeledMinute {
            minute: m.minute + day * MINUTES_PER_DAY,
            label: m.label,
        }));
    }
    Ok(timeline)
}

/// Windows a timeline with features drawn from `rng`; unlike the stream path
/// this takes an explicit rng so test features never replay stream draws.
fn windows_from_timeline(
    timeline: &[LabeledMinute],
    feat: &ClassFeatureModel<f64>,
    window_len: usize,
    stride: usize,
    client_id: u64,
    rng: &mut ChaCha8Rng,
) -> Vec<LabeledWindow<f64>> {
    let n = num_segments(timeline.len(), window_len, stride);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let span = &timeline[i * stride..i * stride + window_len];
        let label = majority_label(span);
        out.push(LabeledWindow {
            client_id,
            t: span[0].minute,
            features: feat.sample(label, rng),
            label,
        });
    }
    out
}

fn synth_stream(
    cfg: &ExperimentConfig,
    template: &ScheduleTemplate,
    mix: &ActivityMixTable,
    feat: &ClassFeatureModel<f64>,
    k: u64,
) -> Result<Vec<LabeledWindow<f64>>, HarStreamError> {
    let timeline = client_timeline(cfg, template, mix, k)?;
    let mut rng = rng_for(derive_seed(cfg.master_seed, "stream-features", k), "stream", 0);
    Ok(windows_from_timeline(
        &timeline,
        feat,
        cfg.window_len,
        cfg.window_stride,
        k,
        &mut rng,
    ))
}

/// Local test set: one variance-free day of the client's template, topped up
/// so every class has at least `min_test_windows_per_class` windows.
fn synth_test_set(
    cfg: &ExperimentConfig,
    template: &ScheduleTemplate,
    mix: &ActivityMixTable,
    feat: &ClassFeatureModel<f64>,
    k: u64,
) -> Result<Vec<LabeledWindow<f64>>, HarStreamError> {
    let frozen = ScheduleTemplate::new(
        &template.group_name,
        template
            .entries
            .iter()
            .map(|e| {
                let mut e = e.clone();
                e.start_variance = 0;
                e.duration_variance = 0;
                e
            })
            .collect(),
    )?;
    let schedule = sample_schedule(&frozen, 0, 0);
    let timeline = convert_to_labels(&schedule, mix, derive_seed(cfg.master_seed, "test-labels", k))?;
    let mut rng = rng_for(derive_seed(cfg.master_seed, "test-features", k), "test", 0);
    let mut windows = windows_from_timeline(
        &timeline,
        feat,
        cfg.window_len,
        cfg.window_stride,
        k,
        &mut rng,
    );
    let mut counts = [0usize; NUM_CLASSES];
    for w in &windows {
        counts[w.label] += 1;
    }
    for (c, count) in counts.into_iter().enumerate() {
        for _ in count..cfg.min_test_windows_per_class {
            windows.push(LabeledWindow {
                client_id: k,
                t: 0,
                features: feat.sample(c, &mut rng),
                label: c,
            });
        }
    }
    Ok(windows)
}

/// For ingested data the last fifth of each user's windows becomes the test
/// set; no synthetic injection is possible there.
fn split_external(
    mut windows: Vec<LabeledWindow<f64>>,
    k: u64,
) -> (Vec<LabeledWindow<f64>>, Vec<LabeledWindow<f64>>) {
    for w in &mut windows {
        w.client_id = k;
    }
    let split = windows.len() - windows.len() / 5;
    let test = windows.split_off(split);
    (windows, test)
}

/// Checks that a trace directory has one well-formed file per client.
pub fn validate_trace_dir(dir: &Path, clients: usize, rounds: usize) -> Result<(), BuildError> {
    for k in 0..clients as u64 {
        let path = dir.join(trace_file_name(k));
        let trace = load_trace(&path)?;
        if trace.len() < rounds {
            return Err(BuildError::Availability(AvailabilityError::MalformedRow {
                line: trace.len() + 1,
                message: format!(
                    "trace {} has {} rounds, run needs {rounds}",
                    path.display(),
                    trace.len()
                ),
            }));
        }
    }
    Ok(())
}
