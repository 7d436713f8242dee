//! The dual rehearsal memory.
//!
//! A reservoir-sampled short-term buffer shares a fixed budget with a
//! long-term store of prototype-anchored sub-buffers. The first task may use
//! the whole budget for short-term storage; every later task boundary adds
//! `k` sub-buffers per class to the long-term store and the short-term
//! buffer gives up the same number of slots.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use log::debug;
use rand::Rng as _;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{dac, kmeans, DacConfig};
use crate::error::{Error, Result};
use crate::ot::{squared_distance, Metric, MetricKind, MetricParams, SinkhornConfig};
use crate::rng::derive_seed;
use crate::stream::{Sample, TaskData};

/// Below this many candidates distances are computed on the calling thread.
const PARALLEL_DISTANCE_THRESHOLD: usize = 256;

/// Prototypes per class for one task:
/// `round(rho * lambda_max / (n - 1) / classes)`, halves rounded up.
pub fn fk(rho: f64, lambda_max: usize, n_tasks: usize, classes_in_task: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid("rho", "rho must lie in [0,1]"));
    }
    if n_tasks < 2 {
        return Err(Error::invalid("n_tasks", "long-term memory needs at least 2 tasks"));
    }
    if classes_in_task == 0 {
        return Err(Error::invalid("classes_in_task", "must be at least 1"));
    }
    let raw = rho * lambda_max as f64 / (n_tasks - 1) as f64 / classes_in_task as f64;
    // absorb representation error so exact halves round up
    Ok((raw + 1e-9).round().max(0.0) as usize)
}

/// Default sub-buffer capacity:
/// `max(1, floor(rho * lambda_max / ((n - 1) * k * classes)))`.
pub fn default_sub_buffer_capacity(rho: f64, lambda_max: usize, n_tasks: usize, k: usize, classes: usize) -> usize {
    let denom = (n_tasks.saturating_sub(1) * k * classes) as f64;
    if denom == 0.0 {
        return 1;
    }
    ((rho * lambda_max as f64 / denom + 1e-9).floor() as usize).max(1)
}

/// Order-preserving selection of the samples labelled `class`.
pub fn class_filter(data: &[Sample], class: u32) -> Vec<&Sample> {
    data.iter().filter(|s| s.label == class).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Keep the candidates closest to the prototype.
    #[default]
    Nearest,
    /// Keep the candidates farthest from the prototype.
    Farthest,
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMode::Nearest => "nearest",
            SelectionMode::Farthest => "farthest",
        })
    }
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nearest" => Ok(SelectionMode::Nearest),
            "farthest" => Ok(SelectionMode::Farthest),
            other => Err(Error::invalid("selection", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionPolicy {
    /// Evict a random sample of the currently most-represented class.
    #[default]
    MostRepresented,
    /// Evict a uniformly random sample.
    Uniform,
}

/// What the divide-and-conquer reduction hands to prototype selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DacFeed {
    /// Prototypes and sub-buffer candidates both come from the merged cluster.
    #[default]
    MergedCluster,
    /// Prototypes come from the merged cluster, candidates from the whole class.
    AllClouds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub lambda_max: usize,
    pub rho: f64,
    pub n_tasks: usize,
    pub metric: MetricKind,
    pub metric_params: MetricParams,
    pub selection: SelectionMode,
    /// Overrides the default sub-buffer capacity.
    pub sub_buffer_capacity: Option<usize>,
    pub eviction: EvictionPolicy,
    pub dac: Option<DacConfig>,
    pub dac_feed: DacFeed,
    pub kmeans_max_iters: usize,
    pub seed: u64,
}

impl MemoryConfig {
    pub fn new(lambda_max: usize, rho: f64, n_tasks: usize) -> Self {
        Self {
            lambda_max,
            rho,
            n_tasks,
            metric: MetricKind::Sinkhorn,
            metric_params: MetricParams::default(),
            selection: SelectionMode::Nearest,
            sub_buffer_capacity: None,
            eviction: EvictionPolicy::MostRepresented,
            dac: None,
            dac_feed: DacFeed::MergedCluster,
            kmeans_max_iters: 100,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::invalid("rho", "rho must lie in [0,1]"));
        }
        if self.lambda_max == 0 {
            return Err(Error::invalid("lambda_max", "memory budget must be positive"));
        }
        if self.n_tasks == 0 {
            return Err(Error::invalid("n_tasks", "must be positive"));
        }
        if self.rho > 0.0 && self.n_tasks < 2 {
            return Err(Error::invalid("n_tasks", "long-term memory needs at least 2 tasks"));
        }
        if self.sub_buffer_capacity == Some(0) {
            return Err(Error::invalid("sub_buffer_capacity", "must be at least 1"));
        }
        if self.kmeans_max_iters == 0 {
            return Err(Error::invalid("kmeans_max_iters", "must be positive"));
        }
        if self.metric == MetricKind::MmdRbf && !(self.metric_params.sigma > 0.0) {
            return Err(Error::invalid("sigma", "RBF bandwidth must be positive"));
        }
        self.metric_params.sinkhorn.validate()?;
        if let Some(d) = &self.dac {
            d.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShortTermBuffer {
    pub capacity: usize,
    pub items: Vec<Sample>,
    /// Samples offered so far.
    pub seen: u64,
}

impl ShortTermBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: Vec::with_capacity(capacity),
            seen: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Reservoir step: fill free slots first, afterwards replace a uniformly
/// chosen slot with probability `capacity / seen`.
pub fn reservoir_insert<R: RngCore + ?Sized>(buf: &mut ShortTermBuffer, sample: Sample, rng: &mut R) {
    buf.seen += 1;
    if buf.items.len() < buf.capacity {
        buf.items.push(sample);
        return;
    }
    let j = rng.random_range(0..buf.seen);
    if j < buf.capacity as u64 && (j as usize) < buf.items.len() {
        buf.items[j as usize] = sample;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubMemoryBuffer {
    pub class_id: u32,
    pub prototype: Sample,
    /// The prototype first, then the selected samples in selection order.
    pub items: Vec<Sample>,
    pub capacity: usize,
}

impl SubMemoryBuffer {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Fills a sub-buffer around `prototype`: candidates are ranked by their
/// distance to the prototype (ascending for [`SelectionMode::Nearest`],
/// descending for [`SelectionMode::Farthest`], ties by id) and the first
/// `capacity - 1` are kept.
pub fn build_sub_buffer(
    prototype: &Sample,
    candidates: &[&Sample],
    capacity: usize,
    metric: &Metric,
    mode: SelectionMode,
) -> Result<SubMemoryBuffer> {
    if capacity == 0 {
        return Err(Error::invalid("capacity", "sub-buffer capacity must be at least 1"));
    }
    if let Some(bad) = candidates.iter().find(|c| c.label != prototype.label) {
        return Err(Error::invalid(
            "candidates",
            format!(
                "mixed labels: sample {} has label {} but the prototype has {}",
                bad.id, bad.label, prototype.label
            ),
        ));
    }
    let take = (capacity - 1).min(candidates.len());
    let mut items = Vec::with_capacity(take + 1);
    items.push(prototype.clone());
    if take > 0 {
        let distance = |c: &&Sample| metric.distance(&prototype.features, &c.features);
        let dists: Vec<f64> = if candidates.len() >= PARALLEL_DISTANCE_THRESHOLD {
            candidates.par_iter().map(distance).collect::<Result<_>>()?
        } else {
            candidates.iter().map(distance).collect::<Result<_>>()?
        };
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&x, &y| {
            let by_dist = match mode {
                SelectionMode::Nearest => dists[x].total_cmp(&dists[y]),
                SelectionMode::Farthest => dists[y].total_cmp(&dists[x]),
            };
            by_dist.then(candidates[x].id.cmp(&candidates[y].id))
        });
        items.extend(order[..take].iter().map(|&i| candidates[i].clone()));
    }
    Ok(SubMemoryBuffer {
        class_id: prototype.label,
        prototype: prototype.clone(),
        items,
        capacity,
    })
}

/// Parameters of [`select_class_prototypes`].
#[derive(Debug, Clone)]
pub struct PrototypeSelection<'a> {
    pub k: usize,
    pub capacity: usize,
    pub metric: &'a Metric,
    pub mode: SelectionMode,
    pub dac: Option<(DacConfig, DacFeed)>,
    /// Solver settings for the point-cloud distances inside DAC.
    pub cloud_sinkhorn: SinkhornConfig,
    pub kmeans_max_iters: usize,
    pub seed: u64,
}

/// Prototype discovery and sub-buffer filling for one class: optional
/// divide-and-conquer reduction, k-means, medoid snapping (each prototype a
/// distinct sample), then one sub-buffer per prototype. A sample lands in at
/// most one sub-buffer. `k` is clamped to the available samples.
pub fn select_class_prototypes(samples: &[&Sample], sel: &PrototypeSelection<'_>) -> Result<Vec<SubMemoryBuffer>> {
    if samples.is_empty() || sel.k == 0 {
        return Ok(Vec::new());
    }
    let (pool, candidates): (Vec<&Sample>, Vec<&Sample>) = match &sel.dac {
        Some((cfg, feed)) => {
            let mut cfg = *cfg;
            if cfg.min_merge <= sel.k {
                debug!("raising DAC min_merge from {} to {}", cfg.min_merge, sel.k + 1);
                cfg.min_merge = sel.k + 1;
            }
            let feats: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
            let out = dac(&feats, &cfg, &sel.cloud_sinkhorn, derive_seed(sel.seed, "dac", 0))?;
            let merged: Vec<&Sample> = out.indices.iter().map(|&i| samples[i]).collect();
            match feed {
                DacFeed::MergedCluster => (merged.clone(), merged),
                DacFeed::AllClouds => (merged, samples.to_vec()),
            }
        }
        None => (samples.to_vec(), samples.to_vec()),
    };
    let k = sel.k.min(pool.len());
    if k < sel.k {
        debug!("class {}: clamping k from {} to {}", samples[0].label, sel.k, k);
    }
    let feats: Vec<&[f64]> = pool.iter().map(|s| s.features.as_slice()).collect();
    let km = kmeans(&feats, k, sel.kmeans_max_iters, derive_seed(sel.seed, "kmeans", 0))?;

    let mut used = vec![false; pool.len()];
    let mut prototypes = Vec::with_capacity(k);
    for centroid in &km.centroids {
        let pick = pool
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .map(|(i, s)| (i, squared_distance(centroid, &s.features), s.id))
            .min_by(|x, y| x.1.total_cmp(&y.1).then(x.2.cmp(&y.2)));
        if let Some((i, _, _)) = pick {
            used[i] = true;
            prototypes.push(pool[i]);
        }
    }

    let mut claimed: HashSet<u64> = prototypes.iter().map(|p| p.id).collect();
    let mut out = Vec::with_capacity(prototypes.len());
    for proto in prototypes {
        let free: Vec<&Sample> = candidates.iter().copied().filter(|c| !claimed.contains(&c.id)).collect();
        let buf = build_sub_buffer(proto, &free, sel.capacity, sel.metric, sel.mode)?;
        claimed.extend(buf.items.iter().map(|s| s.id));
        out.push(buf);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LongTermMemory {
    pub sub_buffers: Vec<SubMemoryBuffer>,
}

impl LongTermMemory {
    pub fn len(&self) -> usize {
        self.sub_buffers.iter().map(SubMemoryBuffer::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.sub_buffers.iter().flat_map(|b| b.items.iter())
    }
}

/// Summary of one task-boundary update.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEndReport {
    /// 0-based index of the task that just ended.
    pub task: usize,
    /// Prototypes per class requested by the budget rule (0 for the first task).
    pub k: usize,
    pub sub_buffer_capacity: usize,
    /// Prototypes actually created per class.
    pub prototypes_per_class: BTreeMap<u32, usize>,
    pub added: usize,
    pub evicted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualMemory {
    config: MemoryConfig,
    pub short: ShortTermBuffer,
    pub long: LongTermMemory,
    tasks_completed: usize,
    metric: Option<(usize, Metric)>,
}

impl DualMemory {
    pub fn new(config: MemoryConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            short: ShortTermBuffer::new(config.lambda_max),
            long: LongTermMemory::default(),
            tasks_completed: 0,
            metric: None,
            config,
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn tasks_completed(&self) -> usize {
        self.tasks_completed
    }

    pub fn len(&self) -> usize {
        self.short.len() + self.long.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Short-term then long-term contents.
    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.short.items.iter().chain(self.long.samples())
    }

    pub fn class_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for s in self.samples() {
            *counts.entry(s.label).or_insert(0) += 1;
        }
        counts
    }

    pub fn observe<R: RngCore + ?Sized>(&mut self, sample: Sample, rng: &mut R) {
        reservoir_insert(&mut self.short, sample, rng);
    }

    fn metric_for(&mut self, dim: usize) -> Result<&Metric> {
        if self.metric.as_ref().is_none_or(|(d, _)| *d != dim) {
            self.metric = Some((dim, Metric::new(self.config.metric, self.config.metric_params, dim)?));
        }
        Ok(&self.metric.as_ref().expect("metric set").1)
    }

    /// Task-boundary update. After the first task only the budget is
    /// enforced; after later tasks every class of `task` contributes `k`
    /// prototype sub-buffers to the long-term store before rebalancing.
    pub fn on_task_end<R: RngCore + ?Sized>(&mut self, task: &TaskData, rng: &mut R) -> Result<TaskEndReport> {
        let index = self.tasks_completed;
        let mut report = TaskEndReport {
            task: index,
            k: 0,
            sub_buffer_capacity: 0,
            prototypes_per_class: BTreeMap::new(),
            added: 0,
            evicted: 0,
        };
        if index > 0 && self.config.rho > 0.0 && !task.is_empty() {
            let mut classes: Vec<u32> = task.classes.clone();
            classes.sort_unstable();
            classes.dedup();
            let k = fk(self.config.rho, self.config.lambda_max, self.config.n_tasks, classes.len())?;
            let capacity = self.config.sub_buffer_capacity.unwrap_or_else(|| {
                default_sub_buffer_capacity(
                    self.config.rho,
                    self.config.lambda_max,
                    self.config.n_tasks,
                    k,
                    classes.len(),
                )
            });
            report.k = k;
            report.sub_buffer_capacity = capacity;
            let config = self.config.clone();
            let metric = self.metric_for(task.samples[0].dim())?.clone();
            let mut new_buffers = Vec::new();
            for &c in &classes {
                let members = class_filter(&task.samples, c);
                let sel = PrototypeSelection {
                    k,
                    capacity,
                    metric: &metric,
                    mode: config.selection,
                    dac: config.dac.map(|d| (d, config.dac_feed)),
                    cloud_sinkhorn: SinkhornConfig::default(),
                    kmeans_max_iters: config.kmeans_max_iters,
                    seed: derive_seed(config.seed, "prototypes", (index as u64) << 32 | u64::from(c)),
                };
                let bufs = select_class_prototypes(&members, &sel)?;
                report.prototypes_per_class.insert(c, bufs.len());
                new_buffers.extend(bufs);
            }
            let added: usize = new_buffers.iter().map(SubMemoryBuffer::len).sum();
            if self.long.len() + added > config.lambda_max {
                return Err(Error::BudgetOverflow {
                    long: self.long.len() + added,
                    budget: config.lambda_max,
                });
            }
            report.added = added;
            self.long.sub_buffers.extend(new_buffers);
        }
        report.evicted = self.rebalance(rng)?;
        self.tasks_completed += 1;
        Ok(report)
    }

    /// Shrinks the short-term buffer until short + long fits the budget and
    /// sets its capacity to the remaining room. Returns the eviction count.
    pub fn rebalance<R: RngCore + ?Sized>(&mut self, rng: &mut R) -> Result<usize> {
        let long = self.long.len();
        if long > self.config.lambda_max {
            return Err(Error::BudgetOverflow {
                long,
                budget: self.config.lambda_max,
            });
        }
        self.short.capacity = self.config.lambda_max - long;
        let mut evicted = 0;
        while self.short.items.len() > self.short.capacity {
            let victim = match self.config.eviction {
                EvictionPolicy::Uniform => rng.random_range(0..self.short.items.len()),
                EvictionPolicy::MostRepresented => {
                    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
                    for s in &self.short.items {
                        *counts.entry(s.label).or_insert(0) += 1;
                    }
                    // max count, lowest class id on ties
                    let (&class, &count) = counts
                        .iter()
                        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                        .expect("short buffer is non-empty");
                    let nth = rng.random_range(0..count);
                    self.short
                        .items
                        .iter()
                        .enumerate()
                        .filter(|(_, s)| s.label == class)
                        .nth(nth)
                        .map(|(i, _)| i)
                        .expect("class member exists")
                }
            };
            self.short.items.swap_remove(victim);
            evicted += 1;
        }
        Ok(evicted)
    }

    /// Uniform draws with replacement from short ∪ long.
    pub fn replay_batch<R: RngCore + ?Sized>(&self, size: usize, rng: &mut R) -> Vec<Sample> {
        let total = self.len();
        if total == 0 {
            return Vec::new();
        }
        let pool: Vec<&Sample> = self.samples().collect();
        (0..size).map(|_| pool[rng.random_range(0..total)].clone()).collect()
    }

    pub fn snapshot(&self) -> MemorySnapshot {
        let item = |s: &Sample, prototype: bool| SnapshotItem {
            id: s.id,
            label: s.label,
            prototype,
        };
        MemorySnapshot {
            lambda_max: self.config.lambda_max,
            rho: self.config.rho,
            n_tasks: self.config.n_tasks,
            tasks_completed: self.tasks_completed,
            total: self.len(),
            short: ShortSnapshot {
                capacity: self.short.capacity,
                seen: self.short.seen,
                items: self.short.items.iter().map(|s| item(s, false)).collect(),
            },
            long: self
                .long
                .sub_buffers
                .iter()
                .map(|b| SubBufferSnapshot {
                    class_id: b.class_id,
                    prototype_id: b.prototype.id,
                    capacity: b.capacity,
                    items: b.items.iter().map(|s| item(s, s.id == b.prototype.id)).collect(),
                })
                .collect(),
        }
    }
}

/// JSON dump of memory contents (no features).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub lambda_max: usize,
    pub rho: f64,
    pub n_tasks: usize,
    pub tasks_completed: usize,
    pub total: usize,
    pub short: ShortSnapshot,
    pub long: Vec<SubBufferSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortSnapshot {
    pub capacity: usize,
    pub seen: u64,
    pub items: Vec<SnapshotItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubBufferSnapshot {
    pub class_id: u32,
    pub prototype_id: u64,
    pub capacity: usize,
    pub items: Vec<SnapshotItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotItem {
    pub id: u64,
    pub label: u32,
    pub prototype: bool,
}

impl MemorySnapshot {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("snapshot serializes");
        s.push('\n');
        s
    }
}
