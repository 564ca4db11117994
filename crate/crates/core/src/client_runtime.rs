//! Per-client state machine: stream consumption, round participation with
//! stored-model gating, offline training sessions and performance-driven
//! memory updates.

use thiserror::Error;

use crate::availability::{AvailabilityTrace, RoundFlags};
use crate::har_stream::LabeledWindow;
use crate::learner::{self, LearnerError, ModelParams, TrainConfig};
use crate::memory::{infer_infrequent_classes, MemoryBuffer, MemoryError};
use crate::seeding::derive_seed;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("client {0} is not online this round")]
    NotOnline(u64),
    #[error("client {0} is not offline-eligible this round")]
    NotOfflineEligible(u64),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

/// Which scalar the stored-model comparison uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ComparisonMetric {
    #[default]
    OverallAccuracy,
    MacroAccuracy,
}

/// Offline-session planning policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OfflinePolicy {
    pub max_sessions: usize,
    /// Cap on `sessions * |training set|`; `None` means unbounded.
    pub compute_budget: Option<usize>,
}

impl Default for OfflinePolicy {
    fn default() -> Self {
        Self {
            max_sessions: 1,
            compute_budget: None,
        }
    }
}

/// A model upload produced by one participation.
#[derive(Debug, Clone)]
pub struct Upload<F: Scalar> {
    pub params: ModelParams<F>,
    /// Rounds since the uploaded model was synchronized with the server.
    pub staleness: usize,
    pub sample_count: usize,
}

/// Everything one simulated client owns.
#[derive(Debug, Clone)]
pub struct ClientState<F: Scalar> {
    pub id: u64,
    pub buffer: MemoryBuffer<F>,
    pub theta_stored: ModelParams<F>,
    /// Round in which `theta_stored`'s lineage last received the global model.
    pub stored_sync_round: usize,
    pub alpha: f64,
    pub test_set: Vec<LabeledWindow<F>>,
    pub trace: AvailabilityTrace,
    stream: Vec<LabeledWindow<F>>,
    cursor: usize,
    /// Lifetime label counts over the consumed stream.
    label_counts: Vec<u64>,
    offline_sessions_done: u64,
    /// Infrequent-class share threshold for retention.
    pub infrequent_threshold: f64,
    pub comparison_metric: ComparisonMetric,
    seed: u64,
}

impl<F: Scalar> ClientState<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: u64,
        capacity: usize,
        theta_init: ModelParams<F>,
        test_set: Vec<LabeledWindow<F>>,
        trace: AvailabilityTrace,
        stream: Vec<LabeledWindow<F>>,
        num_classes: usize,
        seed: u64,
    ) -> Self {
        Self {
            id,
            buffer: MemoryBuffer::new(capacity),
            theta_stored: theta_init,
            stored_sync_round: 0,
            alpha: 1.0,
            test_set,
            trace,
            stream,
            cursor: 0,
            label_counts: vec![0; num_classes],
            offline_sessions_done: 0,
            infrequent_threshold: 1.0 / num_classes as f64,
            comparison_metric: ComparisonMetric::default(),
            seed,
        }
    }

    pub fn flags(&self, round: usize) -> RoundFlags {
        self.trace.flags(round)
    }

    pub fn online(&self, round: usize) -> bool {
        self.trace.flags(round).online()
    }

    pub fn label_counts(&self) -> &[u64] {
        &self.label_counts
    }

    fn score(&self, params: &ModelParams<F>) -> Result<f64, LearnerError> {
        let report = learner::evaluate(params, &self.test_set)?;
        Ok(match self.comparison_metric {
            ComparisonMetric::OverallAccuracy => report.overall_accuracy,
            ComparisonMetric::MacroAccuracy => report.macro_accuracy(),
        })
    }

    /// Pushes all stream windows timestamped within the round interval into
    /// the buffer; FIFO evictees are offered to the retained region using the
    /// client's current infrequent-class set.
    pub fn advance_stream(&mut self, round: usize, round_minutes: u32) {
        let end = (round as u32 + 1) * round_minutes;
        let mut evictees = Vec::new();
        while self.cursor < self.stream.len() && self.stream[self.cursor].t < end {
            let w = self.stream[self.cursor].clone();
            self.cursor += 1;
            self.label_counts[w.label] += 1;
            evictees.extend(self.buffer.push(w));
        }
        if !evictees.is_empty() && self.buffer.retained_budget() > 0 {
            if let Ok(infrequent) =
                infer_infrequent_classes(&self.label_counts, self.infrequent_threshold)
            {
                let rng_seed = derive_seed(self.seed, "retention", round as u64);
                self.buffer.retain_infrequent(evictees, &infrequent, rng_seed);
            }
        }
    }

    /// One round of local training from the received global model. When
    /// `gate_with_stored` is set, the freshly trained model is uploaded only
    /// if it scores at least as well as the stored one on the local test set
    /// (ties favor the new model); otherwise the stored model is re-uploaded
    /// with its staleness. Returns `None` when there is no trainable data.
    pub fn participate(
        &mut self,
        theta_global: &ModelParams<F>,
        cfg: &TrainConfig,
        round: usize,
        gate_with_stored: bool,
    ) -> Result<Option<Upload<F>>, ClientError> {
        if !self.online(round) {
            return Err(ClientError::NotOnline(self.id));
        }
        let data = self.buffer.training_set();
        if data.is_empty() {
            return Ok(None);
        }
        let cfg = TrainConfig {
            seed: derive_seed(self.seed, "local-train", round as u64),
            ..*cfg
        };
        let trained = learner::local_train(theta_global, &data, &cfg)?;
        if gate_with_stored {
            let new_score = self.score(&trained)?;
            let stored_score = self.score(&self.theta_stored)?;
            if new_score >= stored_score {
                self.theta_stored = trained.clone();
                self.stored_sync_round = round;
                Ok(Some(Upload {
                    params: trained,
                    staleness: 0,
                    sample_count: data.len(),
                }))
            } else {
                Ok(Some(Upload {
                    params: self.theta_stored.clone(),
                    staleness: round - self.stored_sync_round,
                    sample_count: data.len(),
                }))
            }
        } else {
            self.theta_stored = trained.clone();
            self.stored_sync_round = round;
            Ok(Some(Upload {
                params: trained,
                staleness: 0,
                sample_count: data.len(),
            }))
        }
    }

    /// Runs `sessions` offline training sessions on the stored model; each
    /// session keeps its result only if it does not score worse than the
    /// stored model. No server interaction occurs.
    pub fn offline_train(
        &mut self,
        cfg: &TrainConfig,
        sessions: usize,
        round: usize,
    ) -> Result<(), ClientError> {
        if !self.flags(round).offline_eligible() {
            return Err(ClientError::NotOfflineEligible(self.id));
        }
        let data = self.buffer.training_set();
        if data.is_empty() {
            return Ok(());
        }
        for _ in 0..sessions {
            let cfg = TrainConfig {
                seed: derive_seed(self.seed, "offline-train", self.offline_sessions_done),
                ..*cfg
            };
            self.offline_sessions_done += 1;
            let offline = learner::local_train(&self.theta_stored, &data, &cfg)?;
            if self.score(&offline)? >= self.score(&self.theta_stored)? {
                self.theta_stored = offline;
            }
        }
        Ok(())
    }

    /// Measures the received global model on the local test set and resizes
    /// the retained region accordingly.
    pub fn update_alpha(&mut self, theta_global: &ModelParams<F>) -> Result<(), ClientError> {
        let report = learner::evaluate(theta_global, &self.test_set)?;
        self.alpha = report.overall_accuracy;
        self.buffer.set_alpha(self.alpha)?;
        Ok(())
    }

    /// Number of offline sessions to run this round under the policy.
    pub fn plan_offline_sessions(&self, round: usize, policy: &OfflinePolicy) -> usize {
        if !self.flags(round).offline_eligible() {
            return 0;
        }
        let data_len = self.buffer.training_set().len();
        if data_len == 0 {
            return 0;
        }
        let mut sessions = policy.max_sessions;
        if let Some(budget) = policy.compute_budget {
            sessions = sessions.min(budget / data_len);
        }
        sessions
    }
}
