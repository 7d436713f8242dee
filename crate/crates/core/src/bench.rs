//! Wall-clock comparison of prototype selection with and without the
//! divide-and-conquer reduction on the same input.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::clustering::DacConfig;
use crate::error::{Error, Result};
use crate::memory::{select_class_prototypes, DacFeed, PrototypeSelection, SelectionMode, SubMemoryBuffer};
use crate::ot::{Metric, SinkhornConfig};
use crate::stream::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Prototypes (sub-buffers) to select.
    pub k: usize,
    /// Samples per sub-buffer, prototype included.
    pub capacity: usize,
    pub dac: DacConfig,
    pub selection: SelectionMode,
    pub kmeans_max_iters: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub points: usize,
    pub k: usize,
    pub capacity: usize,
    pub dac: DacConfig,
    pub full_seconds: f64,
    pub dac_seconds: f64,
    /// `full_seconds / dac_seconds`.
    pub speedup: f64,
    /// Selected sample ids per sub-buffer, prototype first.
    pub full_selection: Vec<Vec<u64>>,
    pub dac_selection: Vec<Vec<u64>>,
}

fn ids(bufs: &[SubMemoryBuffer]) -> Vec<Vec<u64>> {
    bufs.iter().map(|b| b.items.iter().map(|s| s.id).collect()).collect()
}

/// Runs both selection paths over `samples`, which must share one label.
pub fn bench_prototype_selection(samples: &[Sample], metric: &Metric, cfg: &BenchConfig) -> Result<BenchReport> {
    if samples.len() < 2 * cfg.dac.clusters {
        return Err(Error::invalid(
            "points",
            format!("need at least {} points for {} clusters", 2 * cfg.dac.clusters, cfg.dac.clusters),
        ));
    }
    if samples.iter().any(|s| s.label != samples[0].label) {
        return Err(Error::invalid("points", "all samples must share one label"));
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let run = |dac: Option<(DacConfig, DacFeed)>| -> Result<(f64, Vec<SubMemoryBuffer>)> {
        let sel = PrototypeSelection {
            k: cfg.k,
            capacity: cfg.capacity,
            metric,
            mode: cfg.selection,
            dac,
            cloud_sinkhorn: SinkhornConfig::default(),
            kmeans_max_iters: cfg.kmeans_max_iters,
            seed: cfg.seed,
        };
        let started = Instant::now();
        let out = select_class_prototypes(&refs, &sel)?;
        Ok((started.elapsed().as_secs_f64(), out))
    };
    let (full_seconds, full) = run(None)?;
    let (dac_seconds, reduced) = run(Some((cfg.dac, DacFeed::MergedCluster)))?;
    Ok(BenchReport {
        points: samples.len(),
        k: cfg.k,
        capacity: cfg.capacity,
        dac: cfg.dac,
        full_seconds,
        dac_seconds,
        speedup: full_seconds / dac_seconds.max(f64::MIN_POSITIVE),
        full_selection: ids(&full),
        dac_selection: ids(&reduced),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::{MetricKind, MetricParams};
    use crate::stream::make_synthetic_stream;

    #[test]
    fn small_bench_completes() {
        let s = make_synthetic_stream(1, 4, 50, 4, 5.0, 1).unwrap();
        let pts: Vec<Sample> = s.samples().map(|x| Sample::new(x.id, x.features.clone(), 0)).collect();
        let metric = Metric::new(MetricKind::L2, MetricParams::default(), 4).unwrap();
        let cfg = BenchConfig {
            k: 4,
            capacity: 3,
            dac: DacConfig::new(5, 20, 3).unwrap(),
            selection: SelectionMode::Nearest,
            kmeans_max_iters: 100,
            seed: 3,
        };
        let a = bench_prototype_selection(&pts, &metric, &cfg).unwrap();
        let b = bench_prototype_selection(&pts, &metric, &cfg).unwrap();
        assert_eq!(a.full_selection, b.full_selection);
        assert_eq!(a.dac_selection, b.dac_selection);
        assert_eq!(a.full_selection.len(), 4);
        assert!(a.dac_selection.iter().flatten().all(|&id| id < 200));
    }
}
