//! Samples, task streams and their sources.
//!
//! A [`TaskStream`] is an ordered list of tasks with pairwise-disjoint class
//! sets. Streams are immutable once built; [`TaskStream::batches`] replays
//! them as the one-pass sequence of labelled batches a learner observes.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

pub const DEFAULT_BATCH_SIZE: usize = 32;

/// A feature vector with its class label and a stream-unique id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: u32,
}

impl Sample {
    pub fn new(id: u64, features: Vec<f64>, label: u32) -> Self {
        Self {
            id,
            features,
            label,
        }
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task_index: usize,
    /// Sorted class ids of this task.
    pub classes: Vec<u32>,
    /// Samples in source order.
    pub samples: Vec<Sample>,
}

impl TaskData {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// One batch as handed to the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub task_index: usize,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    tasks: Vec<TaskData>,
    batch_size: usize,
    dim: usize,
}

impl TaskStream {
    /// Validates and assembles a stream. Class sets must be disjoint, every
    /// label must belong to its task, ids must be unique and all feature
    /// vectors must share one dimension.
    pub fn new(mut tasks: Vec<TaskData>, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if tasks.is_empty() {
            return Err(Error::invalid("tasks", "stream needs at least one task"));
        }
        let mut seen_classes = HashSet::new();
        let mut seen_ids = HashSet::new();
        let mut dim = None;
        for (i, task) in tasks.iter_mut().enumerate() {
            task.task_index = i;
            task.classes.sort_unstable();
            task.classes.dedup();
            if task.classes.is_empty() {
                return Err(Error::manifest(
                    format!("tasks[{i}]"),
                    "task declares no classes",
                ));
            }
            for &c in &task.classes {
                if !seen_classes.insert(c) {
                    return Err(Error::manifest(
                        format!("tasks[{i}]"),
                        format!("classes must be disjoint across tasks (class {c} repeats)"),
                    ));
                }
            }
            for s in &task.samples {
                if task.classes.binary_search(&s.label).is_err() {
                    return Err(Error::manifest(
                        format!("tasks[{i}]"),
                        format!("sample {} has label {} outside the task's classes", s.id, s.label),
                    ));
                }
                if !seen_ids.insert(s.id) {
                    return Err(Error::manifest(
                        format!("tasks[{i}]"),
                        format!("duplicate sample id {}", s.id),
                    ));
                }
                match dim {
                    None => dim = Some(s.dim()),
                    Some(d) if d != s.dim() => {
                        return Err(Error::DimensionMismatch {
                            context: format!("sample {}", s.id),
                            expected: d,
                            actual: s.dim(),
                        })
                    }
                    _ => {}
                }
            }
        }
        let dim = dim.ok_or_else(|| Error::invalid("tasks", "stream holds no samples"))?;
        if dim == 0 {
            return Err(Error::invalid("features", "feature dimension must be positive"));
        }
        Ok(Self {
            tasks,
            batch_size,
            dim,
        })
    }

    pub fn tasks(&self) -> &[TaskData] {
        &self.tasks
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of classes in the first task; synthetic streams use the same
    /// count for every task.
    pub fn classes_per_task(&self) -> usize {
        self.tasks[0].classes.len()
    }

    /// All class ids over all tasks, ascending.
    pub fn classes(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.tasks.iter().flat_map(|t| t.classes.iter().copied()).collect();
        set.into_iter().collect()
    }

    pub fn n_samples(&self) -> usize {
        self.tasks.iter().map(TaskData::len).sum()
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.tasks.iter().flat_map(|t| t.samples.iter())
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        self.batch_size = batch_size;
        Ok(self)
    }

    /// The one-pass batch sequence. Tasks come in order; within a task the
    /// samples are shuffled with a generator derived from `shuffle_seed` and
    /// cut into batches of `batch_size`, the last one possibly short.
    pub fn batches(&self, shuffle_seed: u64) -> Vec<Batch> {
        let mut out = Vec::new();
        for task in &self.tasks {
            let mut order: Vec<usize> = (0..task.samples.len()).collect();
            let mut rng = rng_for(shuffle_seed, "batches", task.task_index as u64);
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.batch_size) {
                out.push(Batch {
                    task_index: task.task_index,
                    samples: chunk.iter().map(|&i| task.samples[i].clone()).collect(),
                });
            }
        }
        out
    }

    /// Splits off a stratified held-out set: for each class of each task,
    /// `round(fraction * count)` samples (chosen by seed) go to the held-out
    /// list. Survivors keep their source order.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(TaskStream, Vec<Vec<Sample>>)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::invalid("holdout", "fraction must lie in [0, 1)"));
        }
        let mut train_tasks = Vec::with_capacity(self.tasks.len());
        let mut held = Vec::with_capacity(self.tasks.len());
        for task in &self.tasks {
            let mut test_mask = vec![false; task.samples.len()];
            for &c in &task.classes {
                let mut positions: Vec<usize> = task
                    .samples
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.label == c)
                    .map(|(i, _)| i)
                    .collect();
                let n_test = (fraction * positions.len() as f64).round() as usize;
                let mut rng = rng_for(seed, "holdout", u64::from(c));
                positions.shuffle(&mut rng);
                for &p in &positions[..n_test] {
                    test_mask[p] = true;
                }
            }
            let (test, train): (Vec<_>, Vec<_>) = task
                .samples
                .iter()
                .zip(&test_mask)
                .partition(|(_, &is_test)| is_test);
            train_tasks.push(TaskData {
                task_index: task.task_index,
                classes: task.classes.clone(),
                samples: train.into_iter().map(|(s, _)| s.clone()).collect(),
            });
            held.push(test.into_iter().map(|(s, _)| s.clone()).collect());
        }
        let stream = TaskStream {
            tasks: train_tasks,
            batch_size: self.batch_size,
            dim: self.dim,
        };
        Ok((stream, held))
    }
}

/// Imbalanced variant of a stream: within every task, each class loses the
/// samples at even positions (0, 2, 4, ...) of that class's source order.
/// A class of `c` samples keeps `c - ceil(c / 2)`.
pub fn apply_imbalance(stream: &TaskStream) -> TaskStream {
    let tasks = stream
        .tasks
        .iter()
        .map(|task| {
            let mut position = std::collections::HashMap::<u32, usize>::new();
            let samples = task
                .samples
                .iter()
                .filter(|s| {
                    let p = position.entry(s.label).or_insert(0);
                    let keep = *p % 2 == 1;
                    *p += 1;
                    keep
                })
                .cloned()
                .collect();
            TaskData {
                task_index: task.task_index,
                classes: task.classes.clone(),
                samples,
            }
        })
        .collect();
    TaskStream {
        tasks,
        batch_size: stream.batch_size,
        dim: stream.dim,
    }
}

/// Class means on a square grid with spacing `separation` (class `c` sits at
/// the base-`side` digits of `c`), so pairwise distances are at least
/// `separation` and neighbouring classes share coordinates. The grid is
/// shifted so the means average to the origin.
fn class_means(n_classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    let side = ((n_classes as f64).powf(1.0 / dim as f64).ceil() as usize).max(2);
    let mut means: Vec<Vec<f64>> = (0..n_classes)
        .map(|c| {
            let mut m = vec![0.0; dim];
            let mut rest = c;
            for coord in m.iter_mut() {
                *coord = (rest % side) as f64 * separation;
                rest /= side;
            }
            m
        })
        .collect();
    let center: Vec<f64> = (0..dim)
        .map(|j| means.iter().map(|m| m[j]).sum::<f64>() / n_classes as f64)
        .collect();
    for m in &mut means {
        m.iter_mut().zip(&center).for_each(|(x, c)| *x -= c);
    }
    means
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub per_class: usize,
    pub dim: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_cov_scale")]
    pub cov_scale: f64,
    #[serde(default)]
    pub seed: u64,
    /// Explicit class means, one per class in ascending class-id order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub means: Option<Vec<Vec<f64>>>,
}

fn default_separation() -> f64 {
    6.0
}

fn default_cov_scale() -> f64 {
    1.0
}

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

/// Builds a class-incremental stream of isotropic Gaussian classes.
/// Task `t` owns classes `t * classes_per_task ..`; samples are laid out
/// class by class with ids in generation order.
pub fn make_synthetic_stream(
    n_tasks: usize,
    classes_per_task: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<TaskStream> {
    let tasks: Vec<Vec<u32>> = (0..n_tasks)
        .map(|t| ((t * classes_per_task) as u32..((t + 1) * classes_per_task) as u32).collect())
        .collect();
    let params = SyntheticParams {
        per_class,
        dim,
        separation,
        cov_scale: 1.0,
        seed,
        means: None,
    };
    synthesize(&tasks, &params, DEFAULT_BATCH_SIZE)
}

fn synthesize(tasks: &[Vec<u32>], params: &SyntheticParams, batch_size: usize) -> Result<TaskStream> {
    if tasks.is_empty() || tasks.iter().any(Vec::is_empty) {
        return Err(Error::invalid("tasks", "every task needs at least one class"));
    }
    if params.per_class == 0 {
        return Err(Error::invalid("per_class", "must be positive"));
    }
    if params.dim == 0 {
        return Err(Error::invalid("dim", "must be positive"));
    }
    if !(params.separation > 0.0) || !params.separation.is_finite() {
        return Err(Error::invalid("separation", "must be a positive finite number"));
    }
    if !(params.cov_scale > 0.0) || !params.cov_scale.is_finite() {
        return Err(Error::invalid("cov_scale", "must be a positive finite number"));
    }
    let mut all: Vec<u32> = tasks.iter().flatten().copied().collect();
    all.sort_unstable();
    all.dedup();
    let means = match &params.means {
        Some(means) => {
            if means.len() != all.len() {
                return Err(Error::manifest(
                    "synthetic.means",
                    format!("expected {} means, found {}", all.len(), means.len()),
                ));
            }
            if let Some(bad) = means.iter().position(|m| m.len() != params.dim) {
                return Err(Error::manifest(
                    format!("synthetic.means[{bad}]"),
                    format!("expected dimension {}, found {}", params.dim, means[bad].len()),
                ));
            }
            means.clone()
        }
        None => class_means(all.len(), params.dim, params.separation),
    };
    let std = params.cov_scale.sqrt();
    let mut next_id = 0u64;
    let mut task_data = Vec::with_capacity(tasks.len());
    for (t, classes) in tasks.iter().enumerate() {
        let mut samples = Vec::with_capacity(classes.len() * params.per_class);
        for &c in classes {
            let mean = &means[all.binary_search(&c).expect("class listed")];
            let mut rng = rng_for(params.seed, "synthetic", u64::from(c));
            for _ in 0..params.per_class {
                let features = mean
                    .iter()
                    .map(|&mu| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        mu + std * z
                    })
                    .collect();
                samples.push(Sample::new(next_id, features, c));
                next_id += 1;
            }
        }
        task_data.push(TaskData {
            task_index: t,
            classes: classes.clone(),
            samples,
        });
    }
    TaskStream::new(task_data, batch_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSource {
    /// Feature file, resolved relative to the manifest's directory.
    pub path: PathBuf,
}

/// JSON description of a task stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamManifest {
    pub source: SourceKind,
    /// Class ids of each task, in task order.
    pub tasks: Vec<Vec<u32>>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub imbalance: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvSource>,
}

impl StreamManifest {
    pub fn materialize(&self, base_dir: &Path) -> Result<TaskStream> {
        let stream = match self.source {
            SourceKind::Synthetic => {
                let params = self
                    .synthetic
                    .as_ref()
                    .ok_or_else(|| Error::manifest("synthetic", "missing for synthetic source"))?;
                check_task_classes(&self.tasks)?;
                synthesize(&self.tasks, params, self.batch_size)?
            }
            SourceKind::Csv => {
                let csv = self
                    .csv
                    .as_ref()
                    .ok_or_else(|| Error::manifest("csv", "missing for csv source"))?;
                check_task_classes(&self.tasks)?;
                let path = base_dir.join(&csv.path);
                let rows = read_feature_csv(&path)?;
                let mut tasks: Vec<TaskData> = self
                    .tasks
                    .iter()
                    .enumerate()
                    .map(|(i, classes)| TaskData {
                        task_index: i,
                        classes: classes.clone(),
                        samples: Vec::new(),
                    })
                    .collect();
                for (row, (features, label)) in rows.into_iter().enumerate() {
                    let owner = tasks
                        .iter()
                        .position(|t| t.classes.contains(&label))
                        .ok_or_else(|| {
                            Error::manifest(
                                format!("csv row {}", row + 1),
                                format!("unknown class id {label}"),
                            )
                        })?;
                    tasks[owner].samples.push(Sample::new(row as u64, features, label));
                }
                TaskStream::new(tasks, self.batch_size)?
            }
        };
        Ok(if self.imbalance {
            apply_imbalance(&stream)
        } else {
            stream
        })
    }
}

fn check_task_classes(tasks: &[Vec<u32>]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::manifest("tasks", "at least one task is required"));
    }
    let mut seen = HashSet::new();
    for (i, classes) in tasks.iter().enumerate() {
        if classes.is_empty() {
            return Err(Error::manifest(format!("tasks[{i}]"), "task declares no classes"));
        }
        for &c in classes {
            if !seen.insert(c) {
                return Err(Error::manifest(
                    format!("tasks[{i}]"),
                    format!("classes must be disjoint (class {c} repeats)"),
                ));
            }
        }
    }
    Ok(())
}

/// Loads a manifest and materializes its stream.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<TaskStream> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let manifest: StreamManifest = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    manifest.materialize(base)
}

/// Reads a feature file: one sample per line, `d` floats then an integer
/// label, comma separated, no header. Blank lines are skipped.
pub fn read_feature_csv(path: &Path) -> Result<Vec<(Vec<f64>, u32)>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rows = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(Error::manifest(
                format!("{}:{}", path.display(), lineno + 1),
                "row needs at least one feature and a label",
            ));
        }
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(Error::DimensionMismatch {
                    context: format!("{}:{}", path.display(), lineno + 1),
                    expected: w - 1,
                    actual: fields.len() - 1,
                })
            }
            _ => {}
        }
        let (label, feats) = fields.split_last().expect("non-empty");
        let features = feats
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Error::manifest(format!("{}:{}", path.display(), lineno + 1), e.to_string()))?;
        let label = label
            .parse::<u32>()
            .map_err(|e| Error::manifest(format!("{}:{} label", path.display(), lineno + 1), e.to_string()))?;
        rows.push((features, label));
    }
    Ok(rows)
}

/// Writes samples in the feature-file format read by [`read_feature_csv`].
pub fn write_feature_csv<'a>(path: &Path, samples: impl IntoIterator<Item = &'a Sample>) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        for f in &s.features {
            out.push_str(&format!("{f},"));
        }
        out.push_str(&format!("{}\n", s.label));
    }
    fs::write(path, out).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
