//! Desk-scale online training loop and its metrics.
//!
//! The learner is a single linear softmax layer trained with one SGD step per
//! incoming batch, the batch concatenated with a replay draw from the dual
//! memory. Accuracy is recorded on held-out data at every task boundary.

use std::collections::BTreeMap;
use std::time::Instant;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::DualMemory;
use crate::rng::{derive_seed, rng_for};
use crate::stream::{Sample, TaskStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub learning_rate: f64,
    /// Standard deviation of the initial weights.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            init_scale: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    n_classes: usize,
    dim: usize,
    /// Row-major `n_classes x dim`.
    weights: Vec<f64>,
    bias: Vec<f64>,
    learning_rate: f64,
    steps: usize,
}

impl LinearModel {
    pub fn new(n_classes: usize, dim: usize, cfg: &ModelConfig) -> Result<Self> {
        if n_classes == 0 || dim == 0 {
            return Err(Error::invalid("model", "needs at least one class and one feature"));
        }
        if !(cfg.learning_rate > 0.0) || !(cfg.init_scale >= 0.0) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        let mut rng = rng_for(cfg.seed, "model-init", 0);
        let weights = if cfg.init_scale > 0.0 {
            let normal = Normal::new(0.0, cfg.init_scale).map_err(|e| Error::invalid("init_scale", e.to_string()))?;
            (0..n_classes * dim).map(|_| normal.sample(&mut rng)).collect()
        } else {
            vec![0.0; n_classes * dim]
        };
        Ok(Self {
            n_classes,
            dim,
            weights,
            bias: vec![0.0; n_classes],
            learning_rate: cfg.learning_rate,
            steps: 0,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks(self.dim)
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b)
            .collect()
    }

    /// Arg-max over `allowed` classes (all classes when `None`); ties go to
    /// the lowest class id.
    pub fn predict(&self, x: &[f64], allowed: Option<&[u32]>) -> u32 {
        let logits = self.logits(x);
        let mut best = (u32::MAX, f64::NEG_INFINITY);
        let mut consider = |c: u32| {
            let l = logits[c as usize];
            if l > best.1 || best.0 == u32::MAX {
                best = (c, l);
            }
        };
        match allowed {
            Some(classes) => {
                let mut sorted = classes.to_vec();
                sorted.sort_unstable();
                sorted.into_iter().for_each(&mut consider);
            }
            None => (0..self.n_classes as u32).for_each(&mut consider),
        }
        best.0
    }

    /// One SGD step on the mean cross-entropy of `batch`. Returns the loss.
    pub fn sgd_step(&mut self, batch: &[&Sample]) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let n = batch.len() as f64;
        let mut grad_w = vec![0.0; self.weights.len()];
        let mut grad_b = vec![0.0; self.n_classes];
        let mut loss = 0.0;
        for s in batch {
            if s.features.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    context: format!("sample {}", s.id),
                    expected: self.dim,
                    actual: s.features.len(),
                });
            }
            let y = s.label as usize;
            if y >= self.n_classes {
                return Err(Error::invalid("label", format!("label {} outside the model's classes", s.label)));
            }
            let logits = self.logits(&s.features);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            loss += z.ln() + max - logits[y];
            for (c, e) in exps.iter().enumerate() {
                let g = e / z - if c == y { 1.0 } else { 0.0 };
                grad_b[c] += g;
                for (gw, x) in grad_w[c * self.dim..(c + 1) * self.dim].iter_mut().zip(&s.features) {
                    *gw += g * x;
                }
            }
        }
        let loss = loss / n;
        self.steps += 1;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: self.steps,
                loss,
            });
        }
        let lr = self.learning_rate / n;
        for (w, g) in self.weights.iter_mut().zip(&grad_w) {
            *w -= lr * g;
        }
        for (b, g) in self.bias.iter_mut().zip(&grad_b) {
            *b -= lr * g;
        }
        if self.weights.iter().chain(&self.bias).any(|p| !p.is_finite()) {
            return Err(Error::Divergence {
                step: self.steps,
                loss,
            });
        }
        Ok(loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Arg-max over every class seen so far.
    ClassIl,
    /// Arg-max restricted to the task's own classes.
    TaskIl,
}

/// Per-task accuracy of `model` on `held_out[t]`, where `task_classes[t]`
/// lists the classes of task `t`. In class-IL mode the candidate set is the
/// union of all listed tasks' classes.
pub fn evaluate(model: &LinearModel, held_out: &[Vec<Sample>], task_classes: &[Vec<u32>], mode: EvalMode) -> Result<Vec<f64>> {
    if held_out.len() != task_classes.len() {
        return Err(Error::DimensionMismatch {
            context: "held-out tasks vs class lists".into(),
            expected: task_classes.len(),
            actual: held_out.len(),
        });
    }
    let seen: Vec<u32> = task_classes.iter().flatten().copied().collect();
    held_out
        .iter()
        .zip(task_classes)
        .enumerate()
        .map(|(t, (samples, classes))| {
            if samples.is_empty() {
                return Err(Error::invalid("held_out", format!("task {t} has no held-out samples")));
            }
            let allowed = match mode {
                EvalMode::ClassIl => &seen,
                EvalMode::TaskIl => classes,
            };
            let correct = samples
                .iter()
                .filter(|s| model.predict(&s.features, Some(allowed)) == s.label)
                .count();
            Ok(correct as f64 / samples.len() as f64)
        })
        .collect()
}

/// Mean error over all tasks seen at each boundary:
/// `curve[t] = 1 - mean_{tau <= t} acc[t][tau]`.
pub fn forgetting_curve(accuracy: &[Vec<f64>]) -> Vec<f64> {
    accuracy
        .iter()
        .map(|row| {
            if row.is_empty() {
                1.0
            } else {
                1.0 - row.iter().sum::<f64>() / row.len() as f64
            }
        })
        .collect()
}

/// Per-class occupancy of short ∪ long; every class in `classes` appears,
/// with zero when absent.
pub fn buffer_histogram(memory: &DualMemory, classes: &[u32]) -> BTreeMap<u32, usize> {
    let mut hist: BTreeMap<u32, usize> = classes.iter().map(|&c| (c, 0)).collect();
    for (c, n) in memory.class_counts() {
        *hist.entry(c).or_insert(0) += n;
    }
    hist
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Samples drawn from memory per step; 0 disables replay.
    pub replay_size: usize,
    /// Root seed for batch order and memory randomness.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            replay_size: crate::stream::DEFAULT_BATCH_SIZE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryRecord {
    pub task: usize,
    pub short: usize,
    pub long: usize,
    pub prototypes_per_class: BTreeMap<u32, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// `class_il[t][tau]`: class-IL accuracy on task `tau` after task `t`.
    pub class_il: Vec<Vec<f64>>,
    pub task_il: Vec<Vec<f64>>,
    /// From the class-IL matrix.
    pub forgetting: Vec<f64>,
    pub final_average_class_il: f64,
    pub final_average_task_il: f64,
    pub histogram: BTreeMap<u32, usize>,
    pub boundaries: Vec<BoundaryRecord>,
    pub train_seconds: f64,
    pub memory_seconds: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// One pass over `stream`. Every fresh batch is concatenated with a replay
/// draw, used for a single SGD step and then offered to the short-term
/// reservoir; each task boundary triggers the memory update and an
/// evaluation of all tasks seen so far on `held_out`.
pub fn train_online(
    stream: &TaskStream,
    held_out: &[Vec<Sample>],
    mut memory: Option<&mut DualMemory>,
    cfg: &TrainConfig,
) -> Result<(LinearModel, RunMetrics)> {
    if held_out.len() != stream.n_tasks() {
        return Err(Error::DimensionMismatch {
            context: "held-out sets vs tasks".into(),
            expected: stream.n_tasks(),
            actual: held_out.len(),
        });
    }
    let classes = stream.classes();
    let n_classes = *classes.last().expect("stream has classes") as usize + 1;
    let mut model = LinearModel::new(n_classes, stream.dim(), &cfg.model)?;
    let mut reservoir_rng = rng_for(cfg.seed, "reservoir", 0);
    let mut replay_rng = rng_for(cfg.seed, "replay", 0);
    let mut evict_rng = rng_for(cfg.seed, "evict", 0);

    let batches = stream.batches(derive_seed(cfg.seed, "shuffle", 0));
    let task_classes: Vec<Vec<u32>> = stream.tasks().iter().map(|t| t.classes.clone()).collect();
    let mut class_il = Vec::with_capacity(stream.n_tasks());
    let mut task_il = Vec::with_capacity(stream.n_tasks());
    let mut boundaries = Vec::new();
    let mut train_seconds = 0.0;
    let mut memory_seconds = 0.0;

    let mut cursor = 0;
    for task in stream.tasks() {
        let started = Instant::now();
        while cursor < batches.len() && batches[cursor].task_index == task.task_index {
            let fresh = &batches[cursor].samples;
            let replay = match memory.as_deref() {
                Some(mem) if cfg.replay_size > 0 => mem.replay_batch(cfg.replay_size, &mut replay_rng),
                _ => Vec::new(),
            };
            let step: Vec<&Sample> = fresh.iter().chain(replay.iter()).collect();
            model.sgd_step(&step)?;
            if let Some(mem) = memory.as_deref_mut() {
                for s in fresh {
                    mem.observe(s.clone(), &mut reservoir_rng);
                }
            }
            cursor += 1;
        }
        train_seconds += started.elapsed().as_secs_f64();

        if let Some(mem) = memory.as_deref_mut() {
            let started = Instant::now();
            let report = mem.on_task_end(task, &mut evict_rng)?;
            memory_seconds += started.elapsed().as_secs_f64();
            boundaries.push(BoundaryRecord {
                task: task.task_index,
                short: mem.short.len(),
                long: mem.long.len(),
                prototypes_per_class: report.prototypes_per_class,
            });
        }

        let upto = task.task_index + 1;
        class_il.push(evaluate(&model, &held_out[..upto], &task_classes[..upto], EvalMode::ClassIl)?);
        task_il.push(evaluate(&model, &held_out[..upto], &task_classes[..upto], EvalMode::TaskIl)?);
    }

    let histogram = match memory.as_deref() {
        Some(mem) => buffer_histogram(mem, &classes),
        None => classes.iter().map(|&c| (c, 0)).collect(),
    };
    let metrics = RunMetrics {
        forgetting: forgetting_curve(&class_il),
        final_average_class_il: mean(class_il.last().expect("at least one task")),
        final_average_task_il: mean(task_il.last().expect("at least one task")),
        class_il,
        task_il,
        histogram,
        boundaries,
        train_seconds,
        memory_seconds,
    };
    Ok((model, metrics))
}

fn covariance(data: &[Vec<f64>], mean: &[f64]) -> Vec<Vec<f64>> {
    let d = mean.len();
    let mut cov = vec![vec![0.0; d]; d];
    for x in data {
        for i in 0..d {
            let xi = x[i] - mean[i];
            for j in i..d {
                cov[i][j] += xi * (x[j] - mean[j]);
            }
        }
    }
    let n = data.len() as f64;
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= n;
            cov[j][i] = cov[i][j];
        }
    }
    cov
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Dominant eigenvector of a symmetric PSD matrix by power iteration,
/// started from `start` and kept orthogonal to `orthogonal_to`.
fn power_iteration(m: &[Vec<f64>], start: Vec<f64>, orthogonal_to: Option<&[f64]>) -> Vec<f64> {
    let project_out = |v: &mut Vec<f64>| {
        if let Some(u) = orthogonal_to {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
    };
    let mut v = start;
    project_out(&mut v);
    normalize(&mut v);
    for _ in 0..100_000 {
        let mut next: Vec<f64> = m.iter().map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        project_out(&mut next);
        if normalize(&mut next) == 0.0 {
            return v;
        }
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < 1e-13 {
            break;
        }
    }
    v
}

/// Direction of the least-squares line `y = a x + b` through 2-D points.
fn line_direction(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx <= 0.0 {
        if syy <= 0.0 {
            return Err(Error::Degenerate("projected points have zero variance".into()));
        }
        return Ok((0.0, 1.0));
    }
    let slope = sxy / sxx;
    let norm = (1.0 + slope * slope).sqrt();
    Ok((1.0 / norm, slope / norm))
}

/// Unsigned cosine between the least-squares lines of the buffer and the
/// dataset after projecting both onto the dataset's top two principal
/// components.
pub fn pca_alignment(buffer: &[Vec<f64>], dataset: &[Vec<f64>]) -> Result<f64> {
    let Some(first) = dataset.first() else {
        return Err(Error::invalid("dataset", "must be non-empty"));
    };
    if buffer.is_empty() {
        return Err(Error::invalid("buffer", "must be non-empty"));
    }
    let d = first.len();
    if d < 2 {
        return Err(Error::invalid("dataset", "need at least two feature dimensions"));
    }
    for x in buffer.iter().chain(dataset) {
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                context: "pca_alignment".into(),
                expected: d,
                actual: x.len(),
            });
        }
    }
    let n = dataset.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| dataset.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let cov = covariance(dataset, &mean);
    let trace: f64 = (0..d).map(|i| cov[i][i]).sum();
    if !(trace > 0.0) {
        return Err(Error::Degenerate("dataset has zero variance".into()));
    }
    let mut rng = rng_for(0, "power-iteration", d as u64);
    let mut start = || -> Vec<f64> {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        (0..d).map(|_| normal.sample(&mut rng)).collect()
    };
    let pc1 = power_iteration(&cov, start(), None);
    let pc2 = power_iteration(&cov, start(), Some(&pc1));
    let project = |set: &[Vec<f64>]| -> Vec<(f64, f64)> {
        set.iter()
            .map(|x| {
                let (mut a, mut b) = (0.0, 0.0);
                for j in 0..d {
                    let c = x[j] - mean[j];
                    a += c * pc1[j];
                    b += c * pc2[j];
                }
                (a, b)
            })
            .collect()
    };
    let u = line_direction(&project(dataset))?;
    let v = line_direction(&project(buffer))?;
    Ok((u.0 * v.0 + u.1 * v.1).abs().min(1.0))
}
