//! Per-client labeled data stream generation.
//!
//! Daily schedule templates are sampled into concrete day schedules, activity
//! blocks are converted into per-minute label timelines via an activity/label
//! mixing table, and timelines are segmented into fixed-length feature
//! windows. Real delimited sensor files can be ingested through the same
//! windowing path.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::seeding::rng_for;
use crate::{Scalar, CLASS_NAMES, NUM_CLASSES};

pub const MINUTES_PER_DAY: u32 = 1440;

#[derive(Debug, Error)]
pub enum HarStreamError {
    #[error("invalid schedule template: {0}")]
    InvalidTemplate(String),
    #[error("invalid activity mix table: {0}")]
    InvalidMix(String),
    #[error("unknown activity {0:?} has no mix row")]
    UnknownActivity(String),
    #[error("invalid feature model: {0}")]
    InvalidFeatureModel(String),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed row at line {line}: {message}")]
    MalformedRow { line: usize, message: String },
    #[error("unknown class name {name:?} at line {line}")]
    UnknownClass { line: usize, name: String },
}

/// One activity entry of a daily schedule template. Times are minutes since
/// midnight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleEntry {
    pub activity: String,
    pub start: u32,
    pub start_variance: u32,
    pub duration: u32,
    pub duration_variance: u32,
}

/// A daily routine template for one client group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleTemplate {
    pub group_name: String,
    pub entries: Vec<ScheduleEntry>,
}

impl ScheduleTemplate {
    pub fn new(group_name: &str, entries: Vec<ScheduleEntry>) -> Result<Self, HarStreamError> {
        if entries.is_empty() {
            return Err(HarStreamError::InvalidTemplate(format!(
                "template {group_name:?} has no entries"
            )));
        }
        for e in &entries {
            if e.duration == 0 {
                return Err(HarStreamError::InvalidTemplate(format!(
                    "entry {:?} has zero duration",
                    e.activity
                )));
            }
            if e.duration_variance >= e.duration {
                return Err(HarStreamError::InvalidTemplate(format!(
                    "entry {:?}: duration variance {} allows duration below 1",
                    e.activity, e.duration_variance
                )));
            }
            let latest_end =
                e.start + e.start_variance + e.duration + e.duration_variance;
            if latest_end > MINUTES_PER_DAY {
                return Err(HarStreamError::InvalidTemplate(format!(
                    "entry {:?} can end at minute {latest_end}, past the day boundary",
                    e.activity
                )));
            }
        }
        let mut sorted = entries;
        sorted.sort_by_key(|e| e.start);
        Ok(Self {
            group_name: group_name.to_owned(),
            entries: sorted,
        })
    }
}

/// Maps each activity to a weight vector over the six labels. Rows are
/// normalized to sum to one on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityMixTable {
    rows: BTreeMap<String, [f64; NUM_CLASSES]>,
}

impl ActivityMixTable {
    pub fn new(rows: BTreeMap<String, [f64; NUM_CLASSES]>) -> Result<Self, HarStreamError> {
        let mut normalized = BTreeMap::new();
        for (activity, mut weights) in rows {
            if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
                return Err(HarStreamError::InvalidMix(format!(
                    "row {activity:?} has a negative or non-finite weight"
                )));
            }
            let sum: f64 = weights.iter().sum();
            if sum <= 0.0 {
                return Err(HarStreamError::InvalidMix(format!(
                    "row {activity:?} sums to zero"
                )));
            }
            for w in &mut weights {
                *w /= sum;
            }
            normalized.insert(activity, weights);
        }
        Ok(Self { rows: normalized })
    }

    pub fn row(&self, activity: &str) -> Option<&[f64; NUM_CLASSES]> {
        self.rows.get(activity)
    }

    pub fn activities(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }

    /// The mixing table printed in the source material (the over-unity
    /// "Brush teeth" row is renormalized by construction).
    pub fn default_table() -> Self {
        let raw: [(&str, [f64; NUM_CLASSES]); 12] = [
            ("Shower", [0.0, 0.9, 0.1, 0.0, 0.0, 0.0]),
            ("Breakfast", [0.8, 0.1, 0.1, 0.0, 0.0, 0.0]),
            ("Brush teeth", [0.0, 0.9, 0.2, 0.0, 0.0, 0.0]),
            ("Transportation", [0.5, 0.0, 0.5, 0.0, 0.0, 0.0]),
            ("Work", [0.3, 0.3, 0.2, 0.0, 0.1, 0.1]),
            ("At Park", [0.2, 0.1, 0.6, 0.1, 0.0, 0.0]),
            ("At School", [0.5, 0.2, 0.2, 0.0, 0.1, 0.1]),
            ("Lunch", [0.8, 0.1, 0.1, 0.0, 0.0, 0.0]),
            ("Watch TV", [0.8, 0.1, 0.1, 0.0, 0.0, 0.0]),
            ("Study", [0.8, 0.1, 0.1, 0.0, 0.0, 0.0]),
            ("Workout", [0.0, 0.1, 0.4, 0.3, 0.1, 0.1]),
            ("Dinner", [0.8, 0.1, 0.1, 0.0, 0.0, 0.0]),
        ];
        let rows = raw
            .into_iter()
            .map(|(k, v)| (k.to_owned(), v))
            .collect();
        Self::new(rows).expect("built-in table is valid")
    }
}

/// One fixed-length segment of the sensor stream with a single label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindow<F: Scalar> {
    pub client_id: u64,
    /// Simulated minute of the first covered timeline entry.
    pub t: u32,
    pub features: Vec<F>,
    pub label: usize,
}

/// Synthetic per-class isotropic Gaussian feature model.
#[derive(Debug, Clone)]
pub struct ClassFeatureModel<F: Scalar> {
    means: Vec<Vec<F>>,
    stds: Vec<Vec<F>>,
    pub seed: u64,
}

impl<F: Scalar> ClassFeatureModel<F> {
    pub fn new(means: Vec<Vec<F>>, stds: Vec<Vec<F>>, seed: u64) -> Result<Self, HarStreamError> {
        if means.len() != stds.len() || means.is_empty() {
            return Err(HarStreamError::InvalidFeatureModel(
                "means/stds class counts differ or are empty".into(),
            ));
        }
        let dim = means[0].len();
        for (c, (m, s)) in means.iter().zip(&stds).enumerate() {
            if m.len() != dim || s.len() != dim {
                return Err(HarStreamError::InvalidFeatureModel(format!(
                    "class {c} has inconsistent dimensions"
                )));
            }
            if s.iter().any(|v| *v <= F::zero()) {
                return Err(HarStreamError::InvalidFeatureModel(format!(
                    "class {c} has a non-positive standard deviation"
                )));
            }
        }
        for a in 0..means.len() {
            for b in (a + 1)..means.len() {
                if means[a] == means[b] {
                    return Err(HarStreamError::InvalidFeatureModel(format!(
                        "classes {a} and {b} share the same mean"
                    )));
                }
            }
        }
        Ok(Self { means, stds, seed })
    }

    /// Random class means of the given dimension with isotropic noise;
    /// `separation` scales the means, `noise_std` the per-dimension spread.
    pub fn random(
        num_classes: usize,
        dim: usize,
        separation: f64,
        noise_std: f64,
        seed: u64,
    ) -> Result<Self, HarStreamError> {
        let mut rng = rng_for(seed, "feature-model", 0);
        let means = (0..num_classes)
            .map(|_| {
                (0..dim)
                    .map(|_| {
                        F::from_f64(separation * standard_normal(&mut rng)).unwrap()
                    })
                    .collect()
            })
            .collect();
        let stds = vec![vec![F::from_f64(noise_std).unwrap(); dim]; num_classes];
        Self::new(means, stds, seed)
    }

    pub fn feature_dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    /// Draws one feature vector for `label` from the given rng.
    pub fn sample(&self, label: usize, rng: &mut ChaCha8Rng) -> Vec<F> {
        self.means[label]
            .iter()
            .zip(&self.stds[label])
            .map(|(m, s)| *m + *s * F::from_f64(standard_normal(rng)).unwrap())
            .collect()
    }
}

/// Box-Muller draw; two uniforms per normal keeps the stream deterministic
/// without a cached second value.
pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// A concrete activity block of a sampled day.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduledBlock {
    pub activity: String,
    pub start: u32,
    pub duration: u32,
}

/// One labeled minute of a day timeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledMinute {
    pub minute: u32,
    pub label: usize,
}

/// Samples a concrete day schedule from a template. Starts and durations are
/// drawn uniformly on their variance intervals; overlapping blocks are
/// resolved by truncating the earlier activity at the later one's start.
pub fn sample_schedule(
    template: &ScheduleTemplate,
    day: u32,
    rng_seed: u64,
) -> Vec<ScheduledBlock> {
    let mut rng = rng_for(rng_seed, "schedule", u64::from(day));
    let mut blocks: Vec<ScheduledBlock> = template
        .entries
        .iter()
        .map(|e| {
            let lo = e.start.saturating_sub(e.start_variance);
            let hi = e.start + e.start_variance;
            let start = rng.gen_range(lo..=hi);
            let dlo = e.duration - e.duration_variance;
            let dhi = e.duration + e.duration_variance;
            let duration = rng.gen_range(dlo..=dhi).max(1);
            ScheduledBlock {
                activity: e.activity.clone(),
                start,
                duration: duration.min(MINUTES_PER_DAY - start.min(MINUTES_PER_DAY)),
            }
        })
        .collect();
    blocks.sort_by(|a, b| a.start.cmp(&b.start).then(a.activity.cmp(&b.activity)));
    // Truncate overlaps: an earlier block ends where the next one starts.
    let mut resolved: Vec<ScheduledBlock> = Vec::with_capacity(blocks.len());
    for b in blocks {
        if let Some(prev) = resolved.last_mut() {
            if prev.start + prev.duration > b.start {
                if b.start <= prev.start {
                    resolved.pop();
                } else {
                    prev.duration = b.start - prev.start;
                }
            }
        }
        if b.duration > 0 {
            resolved.push(b);
        }
    }
    resolved
}

/// Converts a day schedule to a per-minute label timeline. Within each block
/// minutes are apportioned among labels by largest-remainder rounding of the
/// block's mix row; the label runs are emitted in a seeded shuffled order.
pub fn convert_to_labels(
    schedule: &[ScheduledBlock],
    mix: &ActivityMixTable,
    rng_seed: u64,
) -> Result<Vec<LabeledMinute>, HarStreamError> {
    let mut rng = rng_for(rng_seed, "label-conversion", 0);
    let mut timeline = Vec::new();
    for block in schedule {
        let row = mix
            .row(&block.activity)
            .ok_or_else(|| HarStreamError::UnknownActivity(block.activity.clone()))?;
        let counts = largest_remainder(row, block.duration as usize);
        let mut runs: Vec<(usize, usize)> = counts
            .iter()
            .enumerate()
            .filter(|(_, n)| **n > 0)
            .map(|(c, n)| (c, *n))
            .collect();
        shuffle(&mut runs, &mut rng);
        let mut minute = block.start;
        for (label, n) in runs {
            for _ in 0..n {
                timeline.push(LabeledMinute { minute, label });
                minute += 1;
            }
        }
    }
    Ok(timeline)
}

/// Apportions `total` whole minutes to classes proportionally to `weights`
/// using the largest-remainder method. Ties go to the lower class index.
pub fn largest_remainder(weights: &[f64; NUM_CLASSES], total: usize) -> [usize; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    let mut fracs: Vec<(usize, f64)> = Vec::with_capacity(NUM_CLASSES);
    let mut assigned = 0usize;
    for (c, w) in weights.iter().enumerate() {
        let exact = w * total as f64;
        let base = exact.floor() as usize;
        counts[c] = base;
        assigned += base;
        fracs.push((c, exact - base as f64));
    }
    fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (c, _) in fracs.into_iter().take(total - assigned) {
        counts[c] += 1;
    }
    counts
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Majority label of a timeline span; ties break toward the label whose
/// first occurrence in the span is earliest.
pub fn majority_label(span: &[LabeledMinute]) -> usize {
    let mut counts = [0usize; NUM_CLASSES];
    for m in span {
        counts[m.label] += 1;
    }
    let best = *counts.iter().max().unwrap();
    for m in span {
        if counts[m.label] == best {
            return m.label;
        }
    }
    unreachable!("non-empty span always has a majority label")
}

/// Number of windows a timeline of length `len` yields.
pub fn num_segments(len: usize, window_len: usize, stride: usize) -> usize {
    if len < window_len {
        0
    } else {
        (len - window_len) / stride + 1
    }
}

/// Segments a label timeline into windows with synthetic features drawn from
/// the class model of each window's majority label.
pub fn emit_windows<F: Scalar>(
    timeline: &[LabeledMinute],
    feat: &ClassFeatureModel<F>,
    window_len: usize,
    stride: usize,
    client_id: u64,
) -> Vec<LabeledWindow<F>> {
    assert!(window_len >= 1 && stride >= 1);
    let n = num_segments(timeline.len(), window_len, stride);
    let mut rng = rng_for(feat.seed, "window-features", client_id);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let span = &timeline[i * stride..i * stride + window_len];
        let label = majority_label(span);
        out.push(LabeledWindow {
            client_id,
            t: span[0].minute,
            features: feat.sample(label, &mut rng),
            label,
        });
    }
    out
}

fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|c| c.eq_ignore_ascii_case(name))
}

/// Ingests a delimited sensor file with rows `user,class,timestamp,x,y,z` and
/// segments each user's rows into windows (3 channels, features taken from
/// the file). Returns one stream per user, ordered by user name.
pub fn ingest_external<F: Scalar>(
    path: &Path,
    window_len: usize,
    stride: usize,
) -> Result<Vec<(String, Vec<LabeledWindow<F>>)>, HarStreamError> {
    assert!(window_len >= 1 && stride >= 1);
    let file = File::open(path).map_err(|source| HarStreamError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut per_user: BTreeMap<String, Vec<(u32, usize, [f64; 3])>> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| HarStreamError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let trimmed = line.trim().trim_end_matches(';');
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 6 {
            return Err(HarStreamError::MalformedRow {
                line: line_no,
                message: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let label = class_index(fields[1]).ok_or_else(|| HarStreamError::UnknownClass {
            line: line_no,
            name: fields[1].to_owned(),
        })?;
        let ts: u64 = fields[2].parse().map_err(|_| HarStreamError::MalformedRow {
            line: line_no,
            message: format!("bad timestamp {:?}", fields[2]),
        })?;
        let mut xyz = [0.0f64; 3];
        for (slot, raw) in xyz.iter_mut().zip(&fields[3..6]) {
            *slot = raw.parse().map_err(|_| HarStreamError::MalformedRow {
                line: line_no,
                message: format!("bad reading {raw:?}"),
            })?;
        }
        per_user
            .entry(fields[0].to_owned())
            .or_default()
            .push(((ts % u64::from(u32::MAX)) as u32, label, xyz));
    }

    let mut streams = Vec::with_capacity(per_user.len());
    for (client_id, (user, rows)) in per_user.into_iter().enumerate() {
        let n = num_segments(rows.len(), window_len, stride);
        let mut windows = Vec::with_capacity(n);
        for i in 0..n {
            let span = &rows[i * stride..i * stride + window_len];
            let span_minutes: Vec<LabeledMinute> = span
                .iter()
                .map(|(t, label, _)| LabeledMinute {
                    minute: *t,
                    label: *label,
                })
                .collect();
            let label = majority_label(&span_minutes);
            let features = span
                .iter()
                .flat_map(|(_, _, xyz)| xyz.iter().map(|v| F::from_f64(*v).unwrap()))
                .collect();
            windows.push(LabeledWindow {
                client_id: client_id as u64,
                t: span[0].0,
                features,
                label,
            });
        }
        streams.push((user, windows));
    }
    Ok(streams)
}
