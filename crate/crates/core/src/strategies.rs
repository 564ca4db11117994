//! Strategy layer: feature-flag specs for FedAvg, REFL-style, MIFA and
//! FlexFed, plus the MIFA update store.
//!
//! The baselines are implemented from their one-line characterizations:
//! REFL-style restricts selection to currently available clients and uses
//! staleness-aware aggregation; MIFA replays each client's most recent
//! parameter delta when the client is absent. Neither full method (REFL's
//! resource-priority scoring, MIFA's variance-reduction machinery) is
//! reproduced.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::learner::ModelParams;
use crate::server::UpdateEnvelope;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("unknown strategy name {0:?}")]
    UnknownName(String),
    #[error("inconsistent flags for {name}: {reason}")]
    InconsistentFlags { name: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StrategyName {
    FedAvg,
    Refl,
    Mifa,
    FlexFed,
}

impl StrategyName {
    pub fn parse(s: &str) -> Result<Self, StrategyError> {
        match s.to_ascii_lowercase().as_str() {
            "fedavg" => Ok(Self::FedAvg),
            "refl" => Ok(Self::Refl),
            "mifa" => Ok(Self::Mifa),
            "flexfed" => Ok(Self::FlexFed),
            other => Err(StrategyError::UnknownName(other.to_owned())),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::FedAvg => "fedavg",
            Self::Refl => "refl",
            Self::Mifa => "mifa",
            Self::FlexFed => "flexfed",
        }
    }
}

/// A named strategy plus its feature flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StrategySpec {
    pub name: StrategyName,
    pub offline_training: bool,
    pub adaptive_memory: bool,
    pub staleness_aggregation: bool,
    pub update_store: bool,
    pub availability_aware_selection: bool,
}

impl StrategySpec {
    /// Canonical flag set for a strategy name.
    pub fn preset(name: StrategyName) -> Self {
        match name {
            StrategyName::FedAvg => Self {
                name,
                offline_training: false,
                adaptive_memory: false,
                staleness_aggregation: false,
                update_store: false,
                availability_aware_selection: false,
            },
            StrategyName::Refl => Self {
                name,
                offline_training: false,
                adaptive_memory: false,
                staleness_aggregation: true,
                update_store: false,
                availability_aware_selection: true,
            },
            StrategyName::Mifa => Self {
                name,
                offline_training: false,
                adaptive_memory: false,
                staleness_aggregation: false,
                update_store: true,
                availability_aware_selection: false,
            },
            StrategyName::FlexFed => Self {
                name,
                offline_training: true,
                adaptive_memory: true,
                staleness_aggregation: true,
                update_store: false,
                availability_aware_selection: true,
            },
        }
    }

    /// Checks the flag set against the name's allowed shape. FlexFed flags
    /// may be switched off individually for ablations; the baselines must
    /// match their canonical flags exactly.
    pub fn validate(&self) -> Result<(), StrategyError> {
        let canonical = Self::preset(self.name);
        let ok = match self.name {
            StrategyName::FlexFed => {
                // ablations may disable flags but never enable the store
                !self.update_store
                    && (!self.offline_training || canonical.offline_training)
                    && (!self.adaptive_memory || canonical.adaptive_memory)
            }
            _ => *self == canonical,
        };
        if ok {
            Ok(())
        } else {
            Err(StrategyError::InconsistentFlags {
                name: self.name.as_str().to_owned(),
                reason: "flags deviate from the strategy definition".to_owned(),
            })
        }
    }
}

/// Builds a validated strategy from a spec.
pub fn make_strategy(spec: StrategySpec) -> Result<Strategy, StrategyError> {
    spec.validate()?;
    Ok(Strategy {
        spec,
        update_store: if spec.update_store {
            Some(UpdateStore::default())
        } else {
            None
        },
    })
}

/// One stored parameter delta relative to the model distributed in the round
/// it was produced.
#[derive(Debug, Clone)]
struct StoredDelta<F: Scalar> {
    delta: Vec<F>,
    produced_round: usize,
    sample_count: usize,
}

/// Per-client latest update deltas, replayed when a client is absent.
#[derive(Debug, Clone, Default)]
pub struct UpdateStore<F = f64>
where
    F: Scalar,
{
    entries: BTreeMap<u64, StoredDelta<F>>,
    pub replays: u64,
}

impl<F: Scalar> UpdateStore<F> {
    pub fn record(
        &mut self,
        client_id: u64,
        uploaded: &ModelParams<F>,
        distributed: &ModelParams<F>,
        round: usize,
        sample_count: usize,
    ) {
        let delta = uploaded
            .theta
            .iter()
            .zip(&distributed.theta)
            .map(|(u, d)| *u - *d)
            .collect();
        self.entries.insert(
            client_id,
            StoredDelta {
                delta,
                produced_round: round,
                sample_count,
            },
        );
    }

    /// Aggregation inputs for every client id: fresh deltas where present,
    /// replayed stored deltas for absentees, zero deltas for clients that
    /// never participated.
    pub fn aggregate_inputs(
        &mut self,
        current_global: &ModelParams<F>,
        round: usize,
        all_clients: &[u64],
    ) -> Vec<UpdateEnvelope<F>> {
        all_clients
            .iter()
            .map(|id| match self.entries.get(id) {
                Some(stored) => {
                    let staleness = round - stored.produced_round;
                    if staleness > 0 {
                        self.replays += 1;
                    }
                    let theta = current_global
                        .theta
                        .iter()
                        .zip(&stored.delta)
                        .map(|(g, d)| *g + *d)
                        .collect();
                    UpdateEnvelope {
                        client_id: *id,
                        params: ModelParams {
                            shape: current_global.shape,
                            theta,
                        },
                        staleness,
                        sample_count: stored.sample_count.max(1),
                    }
                }
                None => UpdateEnvelope {
                    client_id: *id,
                    params: current_global.clone(),
                    staleness: 0,
                    sample_count: 1,
                },
            })
            .collect()
    }
}

/// A validated strategy with its runtime state.
#[derive(Debug, Clone)]
pub struct Strategy<F = f64>
where
    F: Scalar,
{
    pub spec: StrategySpec,
    pub update_store: Option<UpdateStore<F>>,
}
