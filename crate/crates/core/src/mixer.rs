//! Deterministic weighted sampling over (task, dataset) pools.
//!
//! Ticket streams are generated by a counter-based construction so any
//! subrange can be produced independently and two runs with the same
//! (spec, seed, n) are byte-identical. The generator is part of the
//! compatibility contract:
//!
//! - `splitmix64` is the standard 64-bit mix finalizer
//! - draw `k` for a stream is `splitmix64(splitmix64(k) + seed)`
//! - ticket `i` uses draw `2i` to pick the entry, mapped to `[0, 1)` as
//!   `(r >> 11) * 2^-53` against the cumulative probabilities, and draw
//!   `2i + 1` to pick the record index by 128-bit multiply-shift
//! - epoch shuffles use the same draws with the seed XORed with
//!   `0x45504f4348` ("EPOCH")

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conversation::{TaskId, TaskType};
use crate::error::{Error, Result};

/// Sampling strategies: explicit weight tables plus the four systematic
/// allocations (uniform per task-dataset, size-proportional, and the two
/// task-type-first variants).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Explicit,
    PerTaskDataset,
    PerSize,
    PerTaskTypeThenTaskDataset,
    PerTaskTypeThenSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureEntry {
    pub task: TaskId,
    pub dataset: String,
    #[serde(default)]
    pub weight: f64,
    #[serde(default)]
    pub pool_size: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    #[serde(default = "default_version")]
    pub version: u32,
    pub strategy: Strategy,
    pub seed: u64,
    /// Relative weights per task type for the task-type-first strategies;
    /// defaults to equal allocation over the types present.
    #[serde(default)]
    pub task_type_weights: BTreeMap<TaskType, f64>,
    #[serde(rename = "entry")]
    pub entries: Vec<MixtureEntry>,
}

fn default_version() -> u32 {
    1
}

impl MixtureSpec {
    pub fn load(path: &Path) -> Result<MixtureSpec> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&raw).map_err(|e| Error::Toml {
            path: path.into(),
            source: Box::new(e),
        })
    }

    fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::BadMixture("no entries".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !e.weight.is_finite() || e.weight < 0.0 {
                return Err(Error::BadMixture(format!(
                    "weight for {}/{} must be a finite non-negative number",
                    e.task.as_str(),
                    e.dataset
                )));
            }
            if !seen.insert((e.task, e.dataset.clone())) {
                return Err(Error::BadMixture(format!(
                    "duplicate entry {}/{}",
                    e.task.as_str(),
                    e.dataset
                )));
            }
        }
        for (t, w) in &self.task_type_weights {
            if !w.is_finite() || *w < 0.0 {
                return Err(Error::BadMixture(format!(
                    "task type weight for {} must be a finite non-negative number",
                    t.as_str()
                )));
            }
        }
        Ok(())
    }
}

/// Normalized probability per entry, aligned with `spec.entries`.
pub fn compute_weights(spec: &MixtureSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let n = spec.entries.len();
    let raw: Vec<f64> = match spec.strategy {
        Strategy::Explicit => spec.entries.iter().map(|e| e.weight).collect(),
        Strategy::PerTaskDataset => vec![1.0; n],
        Strategy::PerSize => spec.entries.iter().map(|e| e.pool_size as f64).collect(),
        Strategy::PerTaskTypeThenTaskDataset | Strategy::PerTaskTypeThenSize => {
            let inner = |e: &MixtureEntry| -> f64 {
                match spec.strategy {
                    Strategy::PerTaskTypeThenSize => e.pool_size as f64,
                    _ => 1.0,
                }
            };
            let mut type_mass: BTreeMap<TaskType, f64> = BTreeMap::new();
            for e in &spec.entries {
                *type_mass.entry(e.task.task_type()).or_insert(0.0) += inner(e);
            }
            let mut type_weight: BTreeMap<TaskType, f64> = BTreeMap::new();
            let mut total_tw = 0.0;
            for t in type_mass.keys() {
                let w = spec.task_type_weights.get(t).copied().unwrap_or(1.0);
                type_weight.insert(*t, w);
                total_tw += w;
            }
            if total_tw <= 0.0 {
                return Err(Error::BadMixture("task type weights sum to zero".into()));
            }
            for (t, mass) in &type_mass {
                if *mass <= 0.0 && type_weight[t] > 0.0 {
                    return Err(Error::BadMixture(format!(
                        "task type {} has positive weight but zero inner mass",
                        t.as_str()
                    )));
                }
            }
            spec.entries
                .iter()
                .map(|e| {
                    let t = e.task.task_type();
                    let mass = type_mass[&t];
                    if mass <= 0.0 {
                        0.0
                    } else {
                        (type_weight[&t] / total_tw) * inner(e) / mass
                    }
                })
                .collect()
        }
    };
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(Error::BadMixture("all weights are zero".into()));
    }
    Ok(raw.iter().map(|w| w / total).collect())
}

/// One draw from the sampling stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleTicket {
    pub index: u64,
    pub task: TaskId,
    pub dataset: String,
    pub record_index: u64,
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn counter_rand(seed: u64, counter: u64) -> u64 {
    splitmix64(splitmix64(counter).wrapping_add(seed))
}

fn unit_interval(r: u64) -> f64 {
    (r >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn bounded(r: u64, bound: u64) -> u64 {
    ((r as u128 * bound as u128) >> 64) as u64
}

/// Draws `n` tickets with replacement: entry by computed probability, then
/// a uniform record index within the entry's pool.
pub fn sample_stream(spec: &MixtureSpec, n: u64) -> Result<Vec<SampleTicket>> {
    let weights = compute_weights(spec)?;
    for (entry, &p) in spec.entries.iter().zip(&weights) {
        if p > 0.0 && entry.pool_size == 0 {
            return Err(Error::BadMixture(format!(
                "entry {}/{} is sampled but has an empty pool",
                entry.task.as_str(),
                entry.dataset
            )));
        }
    }
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in &weights {
        acc += w;
        cumulative.push(acc);
    }
    // Guard against accumulated rounding so the final bucket covers 1.0.
    if let Some(last) = cumulative.last_mut() {
        *last = 1.0;
    }
    let mut tickets = Vec::with_capacity(n as usize);
    for i in 0..n {
        let u = unit_interval(counter_rand(spec.seed, 2 * i));
        let slot = cumulative.partition_point(|&c| c <= u).min(weights.len() - 1);
        let entry = &spec.entries[slot];
        let record_index = bounded(counter_rand(spec.seed, 2 * i + 1), entry.pool_size);
        tickets.push(SampleTicket {
            index: i,
            task: entry.task,
            dataset: entry.dataset.clone(),
            record_index,
        });
    }
    Ok(tickets)
}

const EPOCH_TAG: u64 = 0x45504f4348;

/// One deterministic pass over every record of every pool, shuffled.
pub fn epoch_stream(spec: &MixtureSpec) -> Result<Vec<SampleTicket>> {
    spec.validate()?;
    let mut tickets = Vec::new();
    for entry in &spec.entries {
        for record_index in 0..entry.pool_size {
            tickets.push(SampleTicket {
                index: 0,
                task: entry.task,
                dataset: entry.dataset.clone(),
                record_index,
            });
        }
    }
    let shuffle_seed = spec.seed ^ EPOCH_TAG;
    for i in (1..tickets.len()).rev() {
        let j = bounded(counter_rand(shuffle_seed, i as u64), i as u64 + 1) as usize;
        tickets.swap(i, j);
    }
    for (i, t) in tickets.iter_mut().enumerate() {
        t.index = i as u64;
    }
    Ok(tickets)
}

/// Empirical counts and frequencies per task, dataset, and task type.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MixtureStats {
    pub total: u64,
    pub per_task: BTreeMap<String, u64>,
    pub per_dataset: BTreeMap<String, u64>,
    pub per_task_type: BTreeMap<String, u64>,
    pub per_entry: BTreeMap<String, u64>,
}

impl MixtureStats {
    pub fn frequency(count: u64, total: u64) -> f64 {
        if total == 0 {
            0.0
        } else {
            count as f64 / total as f64
        }
    }

    pub fn task_type_frequency(&self, task_type: TaskType) -> f64 {
        Self::frequency(
            self.per_task_type
                .get(task_type.as_str())
                .copied()
                .unwrap_or(0),
            self.total,
        )
    }
}

pub fn mixture_stats<'a, I>(tickets: I) -> MixtureStats
where
    I: IntoIterator<Item = (&'a TaskId, &'a str)>,
{
    let mut stats = MixtureStats::default();
    for (task, dataset) in tickets {
        stats.total += 1;
        *stats.per_task.entry(task.as_str().to_string()).or_insert(0) += 1;
        *stats.per_dataset.entry(dataset.to_string()).or_insert(0) += 1;
        *stats
            .per_task_type
            .entry(task.task_type().as_str().to_string())
            .or_insert(0) += 1;
        *stats
            .per_entry
            .entry(format!("{}/{}", task.as_str(), dataset))
            .or_insert(0) += 1;
    }
    stats
}
