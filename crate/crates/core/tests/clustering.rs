use odedm::clustering::{dac, kmeans, DacConfig};
use odedm::ot::SinkhornConfig;
use odedm::rng::rng_for;
use rand_distr::{Distribution, Normal};

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean(points: &[&Vec<f64>]) -> Vec<f64> {
    let d = points[0].len();
    (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / points.len() as f64).collect()
}

/// Exact minimum-cost perfect matching by DP over subsets.
fn assignment_cost(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut best = vec![f64::INFINITY; 1 << n];
    best[0] = 0.0;
    for mask in 0usize..1 << n {
        let i = mask.count_ones() as usize;
        if i == n || !best[mask].is_finite() {
            continue;
        }
        for j in 0..n {
            if mask & (1 << j) == 0 {
                let next = mask | (1 << j);
                best[next] = best[next].min(best[mask] + sq(&a[i], &b[j]));
            }
        }
    }
    best[(1 << n) - 1] / n as f64
}

fn blobs(centers: &[(f64, f64)], per: usize, spread: f64, seed: u64) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, spread).unwrap();
    let mut rng = rng_for(seed, "blobs", 0);
    centers
        .iter()
        .flat_map(|&(x, y)| (0..per).map(|_| vec![x + normal.sample(&mut rng), y + normal.sample(&mut rng)]).collect::<Vec<_>>())
        .collect()
}

#[test]
fn two_groups_match_exhaustive_partition() {
    let points = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.5]];
    let r = kmeans(&points, 2, 50, 7).unwrap();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << points.len()) - 1 {
        let (mut left, mut right) = (Vec::new(), Vec::new());
        for (i, p) in points.iter().enumerate() {
            if mask & (1 << i) != 0 {
                left.push(p);
            } else {
                right.push(p);
            }
        }
        let cost = |g: &[&Vec<f64>]| {
            let m = mean(g);
            g.iter().map(|p| sq(p, &m)).sum::<f64>()
        };
        best = best.min(cost(&left) + cost(&right));
    }
    assert!((r.inertia - best).abs() < 1e-9, "{} vs {best}", r.inertia);
    let mut centroids = r.centroids.clone();
    centroids.sort_by(|a, b| a[0].total_cmp(&b[0]));
    assert_eq!(centroids, vec![vec![0.0, 0.5], vec![10.0, 0.75]]);
}

#[test]
fn three_blobs_keep_the_near_pair() {
    for seed in 0..5 {
        let points = blobs(&[(0.0, 0.0), (3.0, 0.0), (40.0, 0.0)], 10, 0.2, seed);
        let groups: Vec<Vec<Vec<f64>>> = points.chunks(10).map(<[_]>::to_vec).collect();
        // cheapest qualifying subset: any path over three blobs costs at least its cheapest edge
        let pairs = [(0, 1), (0, 2), (1, 2)];
        let (bi, bj) = *pairs
            .iter()
            .min_by(|x, y| assignment_cost(&groups[x.0], &groups[x.1]).total_cmp(&assignment_cost(&groups[y.0], &groups[y.1])))
            .unwrap();
        let want: Vec<usize> = (bi * 10..bi * 10 + 10).chain(bj * 10..bj * 10 + 10).collect();

        let cfg = DacConfig::new(3, 15, 1).unwrap();
        let out = dac(&points, &cfg, &SinkhornConfig::default(), seed).unwrap();
        assert_eq!(out.indices, want, "seed {seed}");
        assert_eq!(out.levels, 1);
    }
}
