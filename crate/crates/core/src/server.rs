//! Round lifecycle: quorum check, client selection with previous-round
//! exclusion, staleness-scaled aggregation and the full round engine that
//! composes client work under a strategy's feature flags.

use thiserror::Error;

use crate::client_runtime::{ClientState, OfflinePolicy};
use crate::learner::{self, ModelParams, TrainConfig};
use crate::metrics::{AccuracyHistory, MetricsError};
use crate::seeding::{derive_seed, rng_for};
use crate::strategies::Strategy;
use crate::Scalar;
use rand::Rng;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("no clients available for selection")]
    NoClientsAvailable,
    #[error("no updates to aggregate")]
    NoUpdates,
    #[error("non-finite parameters uploaded by client {0}")]
    NonFiniteUpdate(u64),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Learner(#[from] learner::LearnerError),
}

/// Per-round plan parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundPlan {
    pub round: usize,
    pub selection_fraction: f64,
    pub quorum_fraction: f64,
    pub round_minutes: u32,
}

/// One client's contribution to an aggregation.
#[derive(Debug, Clone)]
pub struct UpdateEnvelope<F: Scalar> {
    pub client_id: u64,
    pub params: ModelParams<F>,
    /// Rounds since the update's synchronization point; 0 = fresh.
    pub staleness: usize,
    pub sample_count: usize,
}

/// How client updates are weighted in the aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightingMode {
    /// Weight by the client's sample count.
    #[default]
    SampleCount,
    Uniform,
}

/// Proceed iff the available fraction meets the quorum.
pub fn check_quorum(available: usize, total: usize, quorum_fraction: f64) -> bool {
    if total == 0 {
        return false;
    }
    available as f64 / total as f64 >= quorum_fraction
}

/// Selects `max(1, round(tau * total))` clients from `available`, preferring
/// those not chosen in the previous round; when the post-exclusion pool is
/// too small the remainder is filled from previously selected clients that
/// are available. The result is sorted ascending.
pub fn select_clients(
    available: &[u64],
    previous: &[u64],
    selection_fraction: f64,
    total_clients: usize,
    rng_seed: u64,
) -> Result<Vec<u64>, ServerError> {
    if available.is_empty() {
        return Err(ServerError::NoClientsAvailable);
    }
    let target = ((selection_fraction * total_clients as f64 + 0.5).floor() as usize).max(1);
    let mut rng = rng_for(rng_seed, "selection", 0);
    let mut pool: Vec<u64> = available
        .iter()
        .copied()
        .filter(|c| !previous.contains(c))
        .collect();
    shuffle(&mut pool, &mut rng);
    let mut selected: Vec<u64> = pool.into_iter().take(target).collect();
    if selected.len() < target {
        let mut fallback: Vec<u64> = available
            .iter()
            .copied()
            .filter(|c| previous.contains(c))
            .collect();
        shuffle(&mut fallback, &mut rng);
        selected.extend(fallback.into_iter().take(target - selected.len()));
    }
    selected.sort_unstable();
    Ok(selected)
}

fn shuffle<T>(items: &mut [T], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

fn staleness_scale(staleness: usize) -> f64 {
    1.0 / (1.0 + staleness as f64)
}

/// Weighted convex combination of client models. Each update is weighted by
/// its sample count (or 1 in uniform mode) times the staleness scale
/// `1/(1+s)` when `apply_staleness` is set; the sum is normalized by the
/// total weight.
pub fn aggregate<F: Scalar>(
    updates: &[UpdateEnvelope<F>],
    weighting: WeightingMode,
    apply_staleness: bool,
) -> Result<ModelParams<F>, ServerError> {
    let first = updates.first().ok_or(ServerError::NoUpdates)?;
    let mut acc = vec![F::zero(); first.params.theta.len()];
    let mut total_weight = F::zero();
    for u in updates {
        if u.params.theta.iter().any(|v| !v.is_finite()) {
            return Err(ServerError::NonFiniteUpdate(u.client_id));
        }
        let base = match weighting {
            WeightingMode::SampleCount => u.sample_count.max(1) as f64,
            WeightingMode::Uniform => 1.0,
        };
        let scale = if apply_staleness {
            staleness_scale(u.staleness)
        } else {
            1.0
        };
        let w = F::from_f64(base * scale).unwrap();
        total_weight = total_weight + w;
        for (slot, v) in acc.iter_mut().zip(&u.params.theta) {
            *slot = *slot + w * *v;
        }
    }
    for v in &mut acc {
        *v = *v / total_weight;
    }
    Ok(ModelParams {
        shape: first.params.shape,
        theta: acc,
    })
}

/// Per-round log entry.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub cancelled: bool,
    pub selected: Vec<u64>,
    pub participant_count: usize,
    pub staleness: Vec<usize>,
    /// Mean over clients of overall test accuracy of the (new) global model.
    pub overall_accuracy: f64,
    /// Client-averaged per-class accuracy of the global model.
    pub per_class_accuracy: Vec<f64>,
    pub forgetting: f64,
    pub per_class_forgetting: Vec<f64>,
    /// Mean over clients of test cross-entropy of the global model.
    pub mean_loss: f64,
    pub errors: Vec<String>,
}

/// Instrumentation counters for flag-faithfulness checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub offline_sessions: u64,
    pub alpha_updates: u64,
    pub store_contributions: u64,
}

/// Fixed run parameters shared by all rounds.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub selection_fraction: f64,
    pub quorum_fraction: f64,
    pub round_minutes: u32,
    pub train: TrainConfig,
    pub weighting: WeightingMode,
    pub offline_policy: OfflinePolicy,
    pub master_seed: u64,
    /// Record per-client stored-model accuracy each round.
    pub track_stored_accuracy: bool,
}

/// The simulation engine: all client state, the global model and the metric
/// history for one run.
pub struct Simulation<F: Scalar> {
    pub clients: Vec<ClientState<F>>,
    pub global: ModelParams<F>,
    pub strategy: Strategy<F>,
    pub config: EngineConfig,
    pub history: AccuracyHistory,
    pub counters: Counters,
    pub round: usize,
    prev_selected: Vec<u64>,
    /// `[client][recorded round]`, filled when tracking is on.
    pub stored_accuracy: Vec<Vec<f64>>,
}

impl<F: Scalar> Simulation<F> {
    pub fn new(
        clients: Vec<ClientState<F>>,
        global: ModelParams<F>,
        strategy: Strategy<F>,
        config: EngineConfig,
        num_classes: usize,
    ) -> Self {
        let n = clients.len();
        Self {
            clients,
            global,
            strategy,
            config,
            history: AccuracyHistory::new(n, num_classes),
            counters: Counters::default(),
            round: 0,
            prev_selected: Vec::new(),
            stored_accuracy: vec![Vec::new(); n],
        }
    }

    fn online_ids(&self, round: usize) -> Vec<u64> {
        self.clients
            .iter()
            .filter(|c| c.online(round))
            .map(|c| c.id)
            .collect()
    }

    fn client_mut(&mut self, id: u64) -> &mut ClientState<F> {
        let idx = self
            .clients
            .iter()
            .position(|c| c.id == id)
            .expect("client ids are the vector indices");
        &mut self.clients[idx]
    }

    /// Executes one round: stream advance, quorum, selection, participation,
    /// offline training, aggregation and metric recording. Client errors are
    /// logged into the record instead of aborting the run.
    pub fn run_round(&mut self) -> Result<RoundRecord, ServerError> {
        let round = self.round;
        let spec = self.strategy.spec;
        let mut errors = Vec::new();

        for client in &mut self.clients {
            client.advance_stream(round, self.config.round_minutes);
        }

        let online = self.online_ids(round);
        let quorum_met = check_quorum(
            online.len(),
            self.clients.len(),
            self.config.quorum_fraction,
        );
        if !quorum_met {
            let record = self.finish_round(round, true, Vec::new(), 0, Vec::new(), errors)?;
            self.round += 1;
            return Ok(record);
        }

        let pool: Vec<u64> = if spec.availability_aware_selection {
            online.clone()
        } else {
            self.clients.iter().map(|c| c.id).collect()
        };
        let selection_seed = derive_seed(self.config.master_seed, "selection", round as u64);
        let selected = select_clients(
            &pool,
            &self.prev_selected,
            self.config.selection_fraction,
            self.clients.len(),
            selection_seed,
        )?;

        // Phase 3/6: selected online clients refresh alpha and train.
        let mut uploads = Vec::new();
        let train_cfg = self.config.train;
        let gate = spec.offline_training;
        let global = self.global.clone();
        for id in &selected {
            let adaptive = spec.adaptive_memory;
            let client = self.client_mut(*id);
            if !client.online(round) {
                continue; // selected-but-unavailable contributes nothing
            }
            if adaptive {
                match client.update_alpha(&global) {
                    Ok(()) => {}
                    Err(e) => {
                        errors.push(format!("client {id}: {e}"));
                        continue;
                    }
                }
            }
            match client.participate(&global, &train_cfg, round, gate) {
                Ok(Some(upload)) => uploads.push((*id, upload)),
                Ok(None) => {}
                Err(e) => errors.push(format!("client {id}: {e}")),
            }
            if adaptive {
                self.counters.alpha_updates += 1;
            }
        }

        // Phase 5: offline training for eligible non-selected clients.
        if spec.offline_training {
            let policy = self.config.offline_policy;
            for idx in 0..self.clients.len() {
                let id = self.clients[idx].id;
                if selected.contains(&id) {
                    continue;
                }
                let sessions = self.clients[idx].plan_offline_sessions(round, &policy);
                if sessions == 0 {
                    continue;
                }
                match self.clients[idx].offline_train(&train_cfg, sessions, round) {
                    Ok(()) => self.counters.offline_sessions += sessions as u64,
                    Err(e) => errors.push(format!("client {id}: {e}")),
                }
            }
        }

        // Phase 4: aggregation.
        let participant_count = uploads.len();
        let staleness: Vec<usize> = uploads.iter().map(|(_, u)| u.staleness).collect();
        let envelopes: Vec<UpdateEnvelope<F>> = if spec.update_store {
            let store = self.strategy.update_store.as_mut().expect("store flag set");
            for (id, upload) in &uploads {
                store.record(*id, &upload.params, &global, round, upload.sample_count);
            }
            let all_ids: Vec<u64> = self.clients.iter().map(|c| c.id).collect();
            let inputs = store.aggregate_inputs(&global, round, &all_ids);
            self.counters.store_contributions += inputs.len() as u64;
            inputs
        } else {
            uploads
                .into_iter()
                .map(|(id, u)| UpdateEnvelope {
                    client_id: id,
                    params: u.params,
                    staleness: u.staleness,
                    sample_count: u.sample_count,
                })
                .collect()
        };

        if envelopes.is_empty() {
            errors.push("no uploads this round; global model unchanged".to_owned());
        } else {
            match aggregate(&envelopes, self.config.weighting, spec.staleness_aggregation) {
                Ok(new_global) => self.global = new_global,
                Err(e) => errors.push(e.to_string()),
            }
        }

        self.prev_selected = selected.clone();
        let record =
            self.finish_round(round, false, selected, participant_count, staleness, errors)?;
        self.round += 1;
        Ok(record)
    }

    fn finish_round(
        &mut self,
        round: usize,
        cancelled: bool,
        selected: Vec<u64>,
        participant_count: usize,
        staleness: Vec<usize>,
        errors: Vec<String>,
    ) -> Result<RoundRecord, ServerError> {
        let reports: Vec<_> = self
            .clients
            .iter()
            .map(|c| learner::evaluate(&self.global, &c.test_set))
            .collect::<Result<_, _>>()?;
        self.history.record_round(round, &reports)?;
        let forgetting = self.history.forgetting_round(round)?;
        let per_class_accuracy = self
            .history
            .global_per_class(round)?
            .into_iter()
            .map(|a| a.unwrap_or(0.0))
            .collect();
        let overall_accuracy =
            reports.iter().map(|r| r.overall_accuracy).sum::<f64>() / reports.len() as f64;
        let mean_loss = reports.iter().map(|r| r.mean_loss).sum::<f64>() / reports.len() as f64;

        if self.config.track_stored_accuracy {
            for (idx, client) in self.clients.iter().enumerate() {
                let report = learner::evaluate(&client.theta_stored, &client.test_set)
                    .expect("test sets are non-empty");
                self.stored_accuracy[idx].push(report.overall_accuracy);
            }
        }

        Ok(RoundRecord {
            round,
            cancelled,
            selected,
            participant_count,
            staleness,
            overall_accuracy,
            per_class_accuracy,
            forgetting: forgetting.overall,
            per_class_forgetting: forgetting.per_class,
            mean_loss,
            errors,
        })
    }
}
