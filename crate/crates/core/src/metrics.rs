//! Forgetting and accuracy metrics.
//!
//! Per-round, per-client, per-class accuracies are recorded into an
//! [`AccuracyHistory`]; from it the per-round forgetting value (mean over
//! clients and classes of accuracy drops relative to each running maximum)
//! and the final backward-transfer value are computed.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::learner::EvalReport;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("round {0} already recorded")]
    DuplicateRound(usize),
    #[error("round {0} not recorded")]
    UnknownRound(usize),
    #[error("need at least 2 recorded rounds, have {0}")]
    TooFewRounds(usize),
    #[error("expected {expected} client reports, got {got}")]
    WrongClientCount { expected: usize, got: usize },
}

#[derive(Debug, Clone)]
struct RoundAccuracies {
    /// `[client][class]`, `None` where the class is absent from the test set.
    acc: Vec<Vec<Option<f64>>>,
    /// Running maximum up to and including this round.
    running_max: Vec<Vec<Option<f64>>>,
}

/// Accuracy trajectories indexed by (client, class, round).
#[derive(Debug, Clone)]
pub struct AccuracyHistory {
    num_clients: usize,
    num_classes: usize,
    rounds: BTreeMap<usize, RoundAccuracies>,
}

/// Per-round forgetting with a per-class breakdown. Values are non-positive;
/// magnitudes are what plots usually show.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingRound {
    pub overall: f64,
    pub per_class: Vec<f64>,
}

impl AccuracyHistory {
    pub fn new(num_clients: usize, num_classes: usize) -> Self {
        Self {
            num_clients,
            num_classes,
            rounds: BTreeMap::new(),
        }
    }

    pub fn num_rounds(&self) -> usize {
        self.rounds.len()
    }

    /// Records one round of per-client evaluation reports.
    pub fn record_round(
        &mut self,
        round: usize,
        reports: &[EvalReport],
    ) -> Result<(), MetricsError> {
        if self.rounds.contains_key(&round) {
            return Err(MetricsError::DuplicateRound(round));
        }
        if reports.len() != self.num_clients {
            return Err(MetricsError::WrongClientCount {
                expected: self.num_clients,
                got: reports.len(),
            });
        }
        let acc: Vec<Vec<Option<f64>>> = reports
            .iter()
            .map(|r| {
                let mut row = r.per_class_accuracy.clone();
                row.resize(self.num_classes, None);
                row
            })
            .collect();
        let prev_max = self
            .rounds
            .range(..round)
            .next_back()
            .map(|(_, r)| r.running_max.clone());
        let running_max = match prev_max {
            None => acc.clone(),
            Some(prev) => prev
                .iter()
                .zip(&acc)
                .map(|(pm_row, a_row)| {
                    pm_row
                        .iter()
                        .zip(a_row)
                        .map(|(pm, a)| match (pm, a) {
                            (Some(m), Some(v)) => Some(m.max(*v)),
                            (Some(m), None) => Some(*m),
                            (None, v) => *v,
                        })
                        .collect()
                })
                .collect(),
        };
        self.rounds.insert(round, RoundAccuracies { acc, running_max });
        Ok(())
    }

    /// Mean over clients and classes of `min(0, acc - running_max)` for the
    /// given round. Classes are weighted equally regardless of frequency;
    /// (client, class) cells without a defined accuracy are skipped.
    pub fn forgetting_round(&self, round: usize) -> Result<ForgettingRound, MetricsError> {
        let rec = self
            .rounds
            .get(&round)
            .ok_or(MetricsError::UnknownRound(round))?;
        let mut per_class = vec![0.0f64; self.num_classes];
        for c in 0..self.num_classes {
            let mut sum = 0.0;
            let mut n = 0usize;
            for k in 0..self.num_clients {
                if let (Some(a), Some(m)) = (rec.acc[k][c], rec.running_max[k][c]) {
                    sum += (a - m).min(0.0);
                    n += 1;
                }
            }
            per_class[c] = if n > 0 { sum / n as f64 } else { 0.0 };
        }
        let overall = per_class.iter().sum::<f64>() / self.num_classes as f64;
        Ok(ForgettingRound { overall, per_class })
    }

    /// Global per-class accuracy of a round: unweighted mean over clients.
    pub fn global_per_class(&self, round: usize) -> Result<Vec<Option<f64>>, MetricsError> {
        let rec = self
            .rounds
            .get(&round)
            .ok_or(MetricsError::UnknownRound(round))?;
        Ok((0..self.num_classes)
            .map(|c| {
                let vals: Vec<f64> = (0..self.num_clients).filter_map(|k| rec.acc[k][c]).collect();
                if vals.is_empty() {
                    None
                } else {
                    Some(vals.iter().sum::<f64>() / vals.len() as f64)
                }
            })
            .collect())
    }

    /// Backward transfer over the recorded rounds: for each class, the
    /// maximum over all non-final rounds of the accuracy surplus relative to
    /// the final round, averaged over classes. The final round itself is
    /// excluded from the maximum.
    pub fn bwt_final(&self) -> Result<f64, MetricsError> {
        if self.rounds.len() < 2 {
            return Err(MetricsError::TooFewRounds(self.rounds.len()));
        }
        let last_round = *self.rounds.keys().next_back().unwrap();
        let final_acc = self.global_per_class(last_round)?;
        let mut sum = 0.0;
        let mut classes = 0usize;
        for c in 0..self.num_classes {
            let Some(fin) = final_acc[c] else { continue };
            let mut best = f64::NEG_INFINITY;
            for r in self.rounds.keys().filter(|r| **r != last_round) {
                if let Some(a) = self.global_per_class(*r)?[c] {
                    best = best.max(a - fin);
                }
            }
            if best.is_finite() {
                sum += best;
                classes += 1;
            }
        }
        Ok(if classes > 0 { sum / classes as f64 } else { 0.0 })
    }
}

/// Catastrophic-forgetting indicator for one client: the new loss strictly
/// exceeds the previous one on the same data.
pub fn cf_flag(prev_loss: f64, new_loss: f64) -> bool {
    new_loss > prev_loss
}
