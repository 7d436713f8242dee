//! Array-oriented façade over [`DualMemory`] for callers that own their own
//! training loop. Foreign-language bindings wrap this type one call to one
//! call, so a run through either surface yields the same snapshot.

use crate::error::{Error, Result};
use crate::memory::{DualMemory, MemoryConfig};
use crate::rng::{rng_for, Rng};
use crate::stream::{Sample, TaskData};

#[derive(Debug)]
pub struct MemoryManager {
    memory: Option<DualMemory>,
    dim: Option<usize>,
    next_id: u64,
    reservoir_rng: Rng,
    replay_rng: Rng,
    evict_rng: Rng,
}

/// Replay draw in row-major layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayArrays {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
    pub ids: Vec<u64>,
}

impl MemoryManager {
    /// Random streams are derived from `config.seed` exactly as in
    /// [`crate::trainer::train_online`].
    pub fn new(config: MemoryConfig) -> Result<Self> {
        let seed = config.seed;
        Ok(Self {
            memory: Some(DualMemory::new(config)?),
            dim: None,
            next_id: 0,
            reservoir_rng: rng_for(seed, "reservoir", 0),
            replay_rng: rng_for(seed, "replay", 0),
            evict_rng: rng_for(seed, "evict", 0),
        })
    }

    pub fn is_closed(&self) -> bool {
        self.memory.is_none()
    }

    pub fn memory(&self) -> Result<&DualMemory> {
        self.memory.as_ref().ok_or(Error::Closed)
    }

    fn make_samples(&mut self, features: &[Vec<f64>], labels: &[u32], ids: Option<&[u64]>) -> Result<Vec<Sample>> {
        if features.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                context: "feature rows vs labels".into(),
                expected: features.len(),
                actual: labels.len(),
            });
        }
        if let Some(ids) = ids {
            if ids.len() != labels.len() {
                return Err(Error::DimensionMismatch {
                    context: "ids vs labels".into(),
                    expected: labels.len(),
                    actual: ids.len(),
                });
            }
        }
        let mut dim = self.dim;
        for row in features {
            match dim {
                Some(d) if d != row.len() => {
                    return Err(Error::DimensionMismatch {
                        context: "feature row".into(),
                        expected: d,
                        actual: row.len(),
                    })
                }
                Some(_) => {}
                None => dim = Some(row.len()),
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("features", "must be finite"));
            }
        }
        self.dim = dim;
        Ok(features
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (row, &label))| {
                let id = match ids {
                    Some(ids) => ids[i],
                    None => {
                        self.next_id += 1;
                        self.next_id - 1
                    }
                };
                Sample::new(id, row.clone(), label)
            })
            .collect())
    }

    /// Reservoir-inserts every row. Without `ids`, rows are numbered by an
    /// internal counter.
    pub fn observe_batch(&mut self, features: &[Vec<f64>], labels: &[u32], ids: Option<&[u64]>) -> Result<()> {
        self.memory()?;
        let samples = self.make_samples(features, labels, ids)?;
        let memory = self.memory.as_mut().expect("checked open");
        for s in samples {
            memory.observe(s, &mut self.reservoir_rng);
        }
        Ok(())
    }

    /// Task-boundary update with the full data of the task that just ended.
    /// Returns the number of prototypes created.
    pub fn end_task(&mut self, features: &[Vec<f64>], labels: &[u32], ids: Option<&[u64]>) -> Result<usize> {
        self.memory()?;
        let samples = self.make_samples(features, labels, ids)?;
        let mut classes: Vec<u32> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let memory = self.memory.as_mut().expect("checked open");
        let task = TaskData {
            task_index: memory.tasks_completed(),
            classes,
            samples,
        };
        let report = memory.on_task_end(&task, &mut self.evict_rng)?;
        Ok(report.prototypes_per_class.values().sum())
    }

    pub fn replay(&mut self, size: usize) -> Result<ReplayArrays> {
        let memory = self.memory.as_ref().ok_or(Error::Closed)?;
        let draw = memory.replay_batch(size, &mut self.replay_rng);
        let mut out = ReplayArrays::default();
        for s in draw {
            out.ids.push(s.id);
            out.labels.push(s.label);
            out.features.push(s.features);
        }
        Ok(out)
    }

    pub fn snapshot(&self) -> Result<String> {
        Ok(self.memory()?.snapshot().to_json())
    }

    /// Releases the memory; every later call fails with [`Error::Closed`].
    pub fn close(&mut self) -> Result<()> {
        self.memory.take().map(|_| ()).ok_or(Error::Closed)
    }
}
