//! K-means prototypes, medoid snapping and divide-and-conquer merging.

use rand::Rng as _;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ot::{sinkhorn_point_clouds, squared_distance, PointCloud, SinkhornConfig};
use crate::rng::{derive_seed, Rng};
use crate::stream::Sample;

/// Largest cluster count accepted by [`find_best_path`].
pub const MAX_PATH_CLUSTERS: usize = 12;

const DEFAULT_KMEANS_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every assignment step, ending with the final value.
    pub inertia_history: Vec<f64>,
}

impl KMeansResult {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.len()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

fn check_points<P: AsRef<[f64]>>(points: &[P]) -> Result<usize> {
    let Some(first) = points.first() else {
        return Err(Error::invalid("points", "need at least one point"));
    };
    let d = first.as_ref().len();
    for p in points {
        let p = p.as_ref();
        if p.len() != d {
            return Err(Error::DimensionMismatch {
                context: "k-means input".into(),
                expected: d,
                actual: p.len(),
            });
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("points", "coordinates must be finite"));
        }
    }
    Ok(d)
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seeding<P: AsRef<[f64]>>(points: &[P], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].as_ref().to_vec()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p.as_ref(), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, w) in d2.iter().enumerate() {
                if *w <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < *w {
                    break;
                }
                target -= w;
            }
            pick.expect("positive total weight")
        } else {
            // only duplicates remain
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[next] = true;
        let c = points[next].as_ref().to_vec();
        for (w, p) in d2.iter_mut().zip(points) {
            *w = w.min(squared_distance(p.as_ref(), &c));
        }
        centroids.push(c);
    }
    centroids
}

fn cluster_means<P: AsRef<[f64]>>(
    points: &[P],
    assignments: &[usize],
    previous: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let d = previous[0].len();
    let k = previous.len();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p.as_ref()) {
            *s += x;
        }
    }
    let means = sums
        .into_iter()
        .zip(&counts)
        .zip(previous)
        .map(|((s, &c), prev)| {
            if c == 0 {
                prev.clone()
            } else {
                s.into_iter().map(|x| x / c as f64).collect()
            }
        })
        .collect();
    (means, counts)
}

/// Lloyd's algorithm from k-means++ seeding.
///
/// Stops at an assignment fixpoint or after `max_iters` assignment steps.
/// A cluster that empties is re-seeded at the point farthest from its
/// current centroid.
pub fn kmeans<P: AsRef<[f64]>>(points: &[P], k: usize, max_iters: usize, seed: u64) -> Result<KMeansResult> {
    check_points(points)?;
    let n = points.len();
    if k == 0 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid("k", format!("k = {k} exceeds the {n} available points")));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seeding(points, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let mut inertia = 0.0;
        let mut changed = false;
        for (p, a) in points.iter().zip(assignments.iter_mut()) {
            let (c, d) = nearest(p.as_ref(), &centroids);
            inertia += d;
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        history.push(inertia);
        if !changed {
            converged = true;
            break;
        }
        let (means, counts) = cluster_means(points, &assignments, &centroids);
        centroids = means;
        let mut taken = vec![false; n];
        for c in (0..k).filter(|&c| counts[c] == 0) {
            let far = (0..n)
                .filter(|&i| !taken[i])
                .map(|i| (i, squared_distance(points[i].as_ref(), &centroids[assignments[i]])))
                .fold((usize::MAX, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if far.0 == usize::MAX {
                break;
            }
            taken[far.0] = true;
            centroids[c] = points[far.0].as_ref().to_vec();
        }
    }

    if !converged {
        let (means, _) = cluster_means(points, &assignments, &centroids);
        centroids = means;
    }
    let inertia: f64 = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| squared_distance(p.as_ref(), &centroids[a]))
        .sum();
    if !converged {
        history.push(inertia);
    }
    Ok(KMeansResult {
        centroids,
        assignments,
        inertia,
        iterations,
        inertia_history: history,
    })
}

/// Index of the candidate closest to `centroid` (squared Euclidean), ties to
/// the lowest sample id. `None` when there are no candidates.
pub fn snap_to_medoid(centroid: &[f64], candidates: &[Sample]) -> Option<usize> {
    candidates
        .iter()
        .enumerate()
        .map(|(i, s)| (i, squared_distance(centroid, &s.features), s.id))
        .min_by(|x, y| x.1.total_cmp(&y.1).then(x.2.cmp(&y.2)))
        .map(|(i, _, _)| i)
}

/// Divide-and-conquer parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DacConfig {
    /// Clusters per level.
    pub clusters: usize,
    /// Minimum total size of a merge path.
    pub min_merge: usize,
    /// Recursion limit.
    pub depth: usize,
}

impl DacConfig {
    pub fn new(clusters: usize, min_merge: usize, depth: usize) -> Result<Self> {
        let cfg = Self {
            clusters,
            min_merge,
            depth,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters < 2 {
            return Err(Error::invalid("dac.clusters", "need at least 2 clusters per level"));
        }
        if self.min_merge == 0 {
            return Err(Error::invalid("dac.min_merge", "must be at least 1"));
        }
        Ok(())
    }

    /// Tuned (clusters, depth) for a long-term proportion: (3, 4) at 25 %,
    /// (3, 2) at 50 % and (5, 3) at 75 % or for large budgets.
    pub fn for_proportion(rho: f64, large_budget: bool, min_merge: usize) -> Self {
        let (clusters, depth) = if large_budget || rho > 0.625 {
            (5, 3)
        } else if rho > 0.375 {
            (3, 2)
        } else {
            (3, 4)
        };
        Self {
            clusters,
            min_merge,
            depth,
        }
    }
}

/// An open walk over distinct clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct MergePath {
    pub path: Vec<usize>,
    pub cumulative_cost: f64,
    pub total_size: usize,
}

fn nearly_equal(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

fn validate_distance_matrix(d: &[Vec<f64>], sizes: &[usize]) -> Result<usize> {
    let k = d.len();
    if k > MAX_PATH_CLUSTERS {
        return Err(Error::invalid(
            "distances",
            format!("{k} clusters exceed the exhaustive limit of {MAX_PATH_CLUSTERS}"),
        ));
    }
    if sizes.len() != k {
        return Err(Error::DimensionMismatch {
            context: "cluster sizes".into(),
            expected: k,
            actual: sizes.len(),
        });
    }
    for (i, row) in d.iter().enumerate() {
        if row.len() != k {
            return Err(Error::invalid("distances", "matrix must be square"));
        }
        if row[i] != 0.0 {
            return Err(Error::invalid("distances", "diagonal must be zero"));
        }
        for (j, &x) in row.iter().enumerate() {
            if !x.is_finite() || x < 0.0 {
                return Err(Error::invalid("distances", "entries must be finite and non-negative"));
            }
            if !nearly_equal(x, d[j][i]) {
                return Err(Error::invalid("distances", format!("asymmetric at ({i}, {j})")));
            }
        }
    }
    Ok(k)
}

/// Cheapest open walk over any subset of at least two clusters whose sizes
/// sum to at least `min_merge`. Ties in cost go to the lexicographically
/// smallest path. `None` when no subset qualifies.
pub fn find_best_path(d: &[Vec<f64>], sizes: &[usize], min_merge: usize) -> Result<Option<MergePath>> {
    let k = validate_distance_matrix(d, sizes)?;
    if k < 2 {
        return Ok(None);
    }
    let full = 1usize << k;
    // best[mask * k + first]: cheapest walk over `mask` starting at `first`
    let mut best: Vec<Option<(f64, Vec<usize>)>> = vec![None; full * k];
    for f in 0..k {
        best[(1 << f) * k + f] = Some((0.0, vec![f]));
    }
    let mut masks: Vec<usize> = (1..full).collect();
    masks.sort_by_key(|m| m.count_ones());
    for &mask in masks.iter().filter(|m| m.count_ones() >= 2) {
        for f in (0..k).filter(|f| mask & (1 << f) != 0) {
            let rest = mask & !(1 << f);
            let mut chosen: Option<(f64, usize)> = None;
            for next in (0..k).filter(|n| rest & (1 << n) != 0) {
                let (tail, _) = best[rest * k + next].as_ref().expect("smaller masks filled first");
                let cost = d[f][next] + tail;
                match chosen {
                    Some((c, _)) if cost >= c || nearly_equal(cost, c) => {}
                    _ => chosen = Some((cost, next)),
                }
            }
            let (cost, next) = chosen.expect("rest is non-empty");
            let mut path = Vec::with_capacity(mask.count_ones() as usize);
            path.push(f);
            path.extend_from_slice(&best[rest * k + next].as_ref().expect("filled").1);
            best[mask * k + f] = Some((cost, path));
        }
    }

    let mut winner: Option<(f64, &Vec<usize>, usize)> = None;
    for mask in (1..full).filter(|m| m.count_ones() >= 2) {
        let size: usize = (0..k).filter(|i| mask & (1 << i) != 0).map(|i| sizes[i]).sum();
        if size < min_merge {
            continue;
        }
        for f in (0..k).filter(|f| mask & (1 << f) != 0) {
            let (cost, path) = best[mask * k + f].as_ref().expect("filled");
            let better = match winner {
                None => true,
                Some((c, p, _)) => {
                    if nearly_equal(*cost, c) {
                        path < p
                    } else {
                        *cost < c
                    }
                }
            };
            if better {
                winner = Some((*cost, path, size));
            }
        }
    }
    Ok(winner.map(|(cost, path, size)| MergePath {
        path: path.clone(),
        cumulative_cost: cost,
        total_size: size,
    }))
}

/// Result of [`dac`]: indices into the input, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct DacOutput {
    pub indices: Vec<usize>,
    /// Number of merge levels actually performed.
    pub levels: usize,
}

impl DacOutput {
    pub fn size(&self) -> usize {
        self.indices.len()
    }
}

/// Divide-and-conquer reduction of a point set.
///
/// Each level partitions the current set with k-means, measures pairwise
/// Sinkhorn distances between the resulting clouds, keeps the union of the
/// cheapest qualifying merge path and recurses with one less level of depth.
/// Stops when no path qualifies, the depth is spent, or fewer points than
/// clusters remain.
pub fn dac<P: AsRef<[f64]> + Sync>(
    points: &[P],
    cfg: &DacConfig,
    sinkhorn: &SinkhornConfig,
    seed: u64,
) -> Result<DacOutput> {
    check_points(points)?;
    cfg.validate()?;
    let mut current: Vec<usize> = (0..points.len()).collect();
    let mut levels = 0;
    for level in 0..cfg.depth {
        if current.len() < cfg.clusters {
            break;
        }
        let subset: Vec<&[f64]> = current.iter().map(|&i| points[i].as_ref()).collect();
        let km = kmeans(&subset, cfg.clusters, DEFAULT_KMEANS_ITERS, derive_seed(seed, "dac", level as u64))?;
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); cfg.clusters];
        for (pos, &a) in km.assignments.iter().enumerate() {
            members[a].push(current[pos]);
        }
        members.retain(|m| !m.is_empty());
        if members.len() < 2 {
            break;
        }
        let clouds: Vec<PointCloud> = members
            .iter()
            .map(|m| PointCloud::new(m.iter().map(|&i| points[i].as_ref().to_vec()).collect()))
            .collect::<Result<_>>()?;
        let kc = clouds.len();
        let pairs: Vec<(usize, usize)> = (0..kc).flat_map(|i| (i + 1..kc).map(move |j| (i, j))).collect();
        let costs: Vec<f64> = pairs
            .par_iter()
            .map(|&(i, j)| sinkhorn_point_clouds(&clouds[i], &clouds[j], sinkhorn))
            .collect::<Result<_>>()?;
        let mut dist = vec![vec![0.0; kc]; kc];
        for (&(i, j), c) in pairs.iter().zip(costs) {
            dist[i][j] = c;
            dist[j][i] = c;
        }
        let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
        let Some(path) = find_best_path(&dist, &sizes, cfg.min_merge)? else {
            break;
        };
        let mut merged: Vec<usize> = path.path.iter().flat_map(|&c| members[c].iter().copied()).collect();
        merged.sort_unstable();
        current = merged;
        levels += 1;
    }
    Ok(DacOutput {
        indices: current,
        levels,
    })
}
