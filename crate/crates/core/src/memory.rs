//! Bounded per-client sample store: a FIFO region for the live stream plus a
//! performance-adaptive retention region holding only infrequent-class
//! samples. The retention budget is `round(m * (1 - alpha))` for the owner's
//! current performance `alpha`; retained samples survive FIFO churn and
//! shrink only when the budget does.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use thiserror::Error;

use crate::har_stream::LabeledWindow;
use crate::seeding::rng_for;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("alpha {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("all-zero label counts; infrequent classes undefined")]
    EmptyCounts,
}

/// The set of infrequent classes for one client.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InfrequentClassSet {
    classes: Vec<usize>,
}

impl InfrequentClassSet {
    pub fn new(mut classes: Vec<usize>) -> Self {
        classes.sort_unstable();
        classes.dedup();
        Self { classes }
    }

    pub fn contains(&self, class: usize) -> bool {
        self.classes.binary_search(&class).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Classes whose long-run share of the stream falls strictly below
/// `threshold`. Default threshold is `1 / |C|`.
pub fn infer_infrequent_classes(
    label_counts: &[u64],
    threshold: f64,
) -> Result<InfrequentClassSet, MemoryError> {
    let total: u64 = label_counts.iter().sum();
    if total == 0 {
        return Err(MemoryError::EmptyCounts);
    }
    let classes = label_counts
        .iter()
        .enumerate()
        .filter(|(_, n)| (**n as f64 / total as f64) < threshold)
        .map(|(c, _)| c)
        .collect();
    Ok(InfrequentClassSet::new(classes))
}

#[derive(Debug, Clone, Default)]
struct ClassReservoir<F: Scalar> {
    samples: Vec<LabeledWindow<F>>,
    /// Lifetime count of candidates offered to this class.
    seen: u64,
}

/// Bounded sample store with a FIFO region and a retained region.
#[derive(Debug, Clone)]
pub struct MemoryBuffer<F: Scalar> {
    capacity: usize,
    fifo: VecDeque<LabeledWindow<F>>,
    retained: BTreeMap<usize, ClassReservoir<F>>,
    retained_budget: usize,
}

impl<F: Scalar> MemoryBuffer<F> {
    /// An empty buffer. The retained budget starts at zero; it grows only
    /// through [`MemoryBuffer::set_alpha`].
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            fifo: VecDeque::new(),
            retained: BTreeMap::new(),
            retained_budget: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn retained_budget(&self) -> usize {
        self.retained_budget
    }

    pub fn fifo_len(&self) -> usize {
        self.fifo.len()
    }

    pub fn retained_len(&self) -> usize {
        self.retained.values().map(|r| r.samples.len()).sum()
    }

    pub fn len(&self) -> usize {
        self.fifo.len() + self.retained_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-class sample counts over both regions, for log snapshots.
    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0usize; num_classes];
        for w in &self.fifo {
            counts[w.label] += 1;
        }
        for (class, r) in &self.retained {
            counts[*class] += r.samples.len();
        }
        counts
    }

    /// Appends a window to the FIFO region, evicting the oldest FIFO sample
    /// when the buffer would exceed capacity. Evicted samples are returned so
    /// the caller can offer them to [`MemoryBuffer::retain_infrequent`].
    /// The retained region is touched only if the FIFO is empty and the
    /// total still exceeds capacity.
    pub fn push(&mut self, window: LabeledWindow<F>) -> Vec<LabeledWindow<F>> {
        let mut evicted = Vec::new();
        self.fifo.push_back(window);
        while self.len() > self.capacity {
            if let Some(old) = self.fifo.pop_front() {
                evicted.push(old);
            } else {
                self.evict_one_retained();
            }
        }
        evicted
    }

    fn evict_one_retained(&mut self) {
        // Largest class list first, oldest sample within it.
        let class = self
            .retained
            .iter()
            .max_by(|a, b| {
                a.1.samples
                    .len()
                    .cmp(&b.1.samples.len())
                    .then(b.0.cmp(a.0))
            })
            .map(|(c, _)| *c);
        if let Some(c) = class {
            let r = self.retained.get_mut(&c).unwrap();
            if !r.samples.is_empty() {
                r.samples.remove(0);
            }
            if r.samples.is_empty() {
                self.retained.remove(&c);
            }
        }
    }

    /// Sets the retention budget to `round(m * (1 - alpha))`, evicting excess
    /// retained samples per-class oldest-first starting with the most
    /// populated class.
    pub fn set_alpha(&mut self, alpha: f64) -> Result<(), MemoryError> {
        if !(0.0..=1.0).contains(&alpha) || alpha.is_nan() {
            return Err(MemoryError::AlphaOutOfRange(alpha));
        }
        // round-half-up over the real-valued product
        self.retained_budget = (self.capacity as f64 * (1.0 - alpha) + 0.5).floor() as usize;
        while self.retained_len() > self.retained_budget {
            self.evict_one_retained();
        }
        Ok(())
    }

    /// Offers FIFO evictees to the retained region. Only candidates whose
    /// label is in `infrequent` are considered. The budget is split into
    /// equal per-class quotas (remainder to rarer classes first, rarity by
    /// lifetime offer count); each class keeps a uniform reservoir over all
    /// candidates it has ever been offered. Quota space left unfilled by
    /// classes without candidates is backfilled from the surplus of the
    /// others.
    pub fn retain_infrequent(
        &mut self,
        candidates: Vec<LabeledWindow<F>>,
        infrequent: &InfrequentClassSet,
        rng_seed: u64,
    ) {
        if self.retained_budget == 0 || infrequent.is_empty() {
            return;
        }
        // The infrequent set can drift between offers; classes that left it
        // no longer belong in the retained region.
        self.retained.retain(|c, _| infrequent.contains(*c));
        let mut rng = rng_for(rng_seed, "retention", 0);
        let mut eligible: Vec<LabeledWindow<F>> = candidates
            .into_iter()
            .filter(|w| infrequent.contains(w.label))
            .collect();
        if eligible.is_empty() {
            return;
        }

        let quotas = self.class_quotas(infrequent, &eligible);

        // Trim classes already above their quota before admitting new ones.
        for (class, quota) in &quotas {
            if let Some(r) = self.retained.get_mut(class) {
                while r.samples.len() > *quota {
                    r.samples.remove(0);
                }
            }
        }

        let mut rejected: Vec<LabeledWindow<F>> = Vec::new();
        for w in eligible.drain(..) {
            let quota = *quotas.get(&w.label).unwrap_or(&0);
            let r = self.retained.entry(w.label).or_default();
            r.seen += 1;
            if r.samples.len() < quota {
                r.samples.push(w);
            } else if quota > 0 {
                let j = rng.gen_range(0..r.seen) as usize;
                if j < quota {
                    rejected.push(std::mem::replace(&mut r.samples[j], w));
                } else {
                    rejected.push(w);
                }
            } else {
                rejected.push(w);
            }
        }

        // Backfill leftover budget from rejected candidates.
        let space = self.retained_budget.saturating_sub(self.retained_len());
        let mut seen_extra = 0u64;
        let mut backfill: Vec<LabeledWindow<F>> = Vec::new();
        for w in rejected {
            seen_extra += 1;
            if backfill.len() < space {
                backfill.push(w);
            } else if space > 0 {
                let j = rng.gen_range(0..seen_extra) as usize;
                if j < space {
                    backfill[j] = w;
                }
            }
        }
        for w in backfill {
            self.retained.entry(w.label).or_default().samples.push(w);
        }
        // Retained growth shrinks the FIFO share of the capacity.
        while self.len() > self.capacity {
            if self.fifo.pop_front().is_none() {
                self.evict_one_retained();
            }
        }
        self.retained.retain(|_, r| !r.samples.is_empty() || r.seen > 0);
        debug_assert!(self.retained_len() <= self.retained_budget);
        debug_assert!(self.len() <= self.capacity);
    }

    fn class_quotas(
        &self,
        infrequent: &InfrequentClassSet,
        batch: &[LabeledWindow<F>],
    ) -> BTreeMap<usize, usize> {
        let k = infrequent.len();
        let base = self.retained_budget / k;
        let remainder = self.retained_budget % k;
        // Rarity: fewest lifetime offers (including this batch) first.
        let mut offers: Vec<(u64, usize)> = infrequent
            .iter()
            .map(|c| {
                let prior = self.retained.get(&c).map_or(0, |r| r.seen);
                let now = batch.iter().filter(|w| w.label == c).count() as u64;
                (prior + now, c)
            })
            .collect();
        offers.sort();
        let mut quotas = BTreeMap::new();
        for (i, (_, c)) in offers.into_iter().enumerate() {
            quotas.insert(c, base + usize::from(i < remainder));
        }
        quotas
    }

    /// The training set: FIFO contents first (oldest to newest), then
    /// retained samples by class index then age.
    pub fn training_set(&self) -> Vec<LabeledWindow<F>> {
        let mut out: Vec<LabeledWindow<F>> = self.fifo.iter().cloned().collect();
        for r in self.retained.values() {
            out.extend(r.samples.iter().cloned());
        }
        out
    }

    /// Labels currently held in the retained region.
    pub fn retained_labels(&self) -> Vec<usize> {
        self.retained
            .iter()
            .flat_map(|(c, r)| std::iter::repeat(*c).take(r.samples.len()))
            .collect()
    }
}
