use std::collections::HashSet;

use odedm::clustering::{dac, find_best_path, kmeans, snap_to_medoid, DacConfig};
use odedm::memory::{
    build_sub_buffer, reservoir_insert, DualMemory, MemoryConfig, SelectionMode, ShortTermBuffer, SubMemoryBuffer,
};
use odedm::ot::{
    exact_ot_1d, metric_distance, sinkhorn_distance, to_distribution, CostMatrix, DiscreteDistribution, Metric,
    MetricKind, MetricParams, SinkhornConfig,
};
use odedm::rng::rng_for;
use odedm::stream::{make_synthetic_stream, Sample};
use odedm::trainer::forgetting_curve;
use proptest::prelude::*;

fn simplex(len: usize) -> impl Strategy<Value = DiscreteDistribution> {
    prop::collection::vec(0.01f64..1.0, len).prop_map(|v| {
        let s: f64 = v.iter().sum();
        DiscreteDistribution::new(v.iter().map(|x| x / s).collect()).unwrap()
    })
}

fn pair(max_len: usize) -> impl Strategy<Value = (DiscreteDistribution, DiscreteDistribution)> {
    (2..=max_len).prop_flat_map(|n| (simplex(n), simplex(n)))
}

fn symmetric_distances(k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(0.0f64..10.0, k * (k - 1) / 2).prop_map(move |upper| {
        let mut d = vec![vec![0.0; k]; k];
        let mut it = upper.into_iter();
        for i in 0..k {
            for j in i + 1..k {
                let x = it.next().unwrap();
                d[i][j] = x;
                d[j][i] = x;
            }
        }
        d
    })
}

fn brute_force_path(d: &[Vec<f64>], sizes: &[usize], m: usize) -> Option<(Vec<usize>, f64)> {
    fn extend(
        d: &[Vec<f64>],
        sizes: &[usize],
        m: usize,
        path: &mut Vec<usize>,
        cost: f64,
        size: usize,
        best: &mut Option<(Vec<usize>, f64)>,
    ) {
        if path.len() >= 2 && size >= m {
            let better = match best {
                None => true,
                Some((bp, bc)) => {
                    if (cost - *bc).abs() <= 1e-12 * cost.abs().max(bc.abs()).max(1.0) {
                        *path < *bp
                    } else {
                        cost < *bc
                    }
                }
            };
            if better {
                *best = Some((path.clone(), cost));
            }
        }
        for next in 0..d.len() {
            if path.contains(&next) {
                continue;
            }
            let step = path.last().map_or(0.0, |&last| d[last][next]);
            path.push(next);
            extend(d, sizes, m, path, cost + step, size + sizes[next], best);
            path.pop();
        }
    }
    let mut best = None;
    extend(d, sizes, m, &mut Vec::new(), 0.0, 0, &mut best);
    best
}

fn sample_cloud(n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, dim), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_non_negative(
        x in prop::collection::vec(-5.0f64..5.0, 6),
        y in prop::collection::vec(-5.0f64..5.0, 6),
    ) {
        for kind in MetricKind::ALL {
            let d = metric_distance(kind, &x, &y, &MetricParams::default()).unwrap();
            prop_assert!(d >= 0.0, "{kind}: {d}");
        }
    }

    #[test]
    fn sinkhorn_is_symmetric((a, b) in pair(12)) {
        let cost = CostMatrix::squared_index(a.support_size());
        // the default stopping rule leaves cost error of order tol * max cost
        let cfg = SinkhornConfig { tol: 1e-11, max_iters: 20_000, ..SinkhornConfig::default() };
        let ab = sinkhorn_distance(&a, &b, &cost, &cfg).unwrap().cost;
        let ba = sinkhorn_distance(&b, &a, &cost, &cfg).unwrap().cost;
        prop_assert!((ab - ba).abs() <= 1e-6, "{ab} vs {ba}");
    }

    #[test]
    fn marginal_error_never_increases((a, b) in pair(16), factor in 0.01f64..0.5) {
        let cost = CostMatrix::squared_index(a.support_size());
        let r = sinkhorn_distance(&a, &b, &cost, &SinkhornConfig::relative(factor)).unwrap();
        for w in r.error_history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-15, "{:?}", r.error_history);
        }
    }

    #[test]
    fn converged_plans_are_feasible((a, b) in pair(16)) {
        let cost = CostMatrix::squared_index(a.support_size());
        let cfg = SinkhornConfig::default();
        let r = sinkhorn_distance(&a, &b, &cost, &cfg).unwrap();
        prop_assert!(r.converged);
        prop_assert!(r.max_marginal_violation(&a, &b) <= cfg.tol);
        prop_assert!(r.plan.plan.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn smaller_regularization_approaches_the_exact_cost((a, b) in pair(10)) {
        let cost = CostMatrix::squared_index(a.support_size());
        let exact = exact_ot_1d(&a, &b, 2.0).unwrap();
        let gaps: Vec<f64> = [0.5, 0.1, 0.02]
            .iter()
            .map(|&f| {
                let cfg = SinkhornConfig { max_iters: 20_000, ..SinkhornConfig::relative(f) };
                (sinkhorn_distance(&a, &b, &cost, &cfg).unwrap().cost - exact).abs()
            })
            .collect();
        prop_assert!(gaps[1] <= gaps[0] + 1e-6 && gaps[2] <= gaps[1] + 1e-6, "{gaps:?}");
    }

    #[test]
    fn entropic_cost_bounds_the_exact_cost((a, b) in pair(12)) {
        // any feasible plan costs at least the optimum
        let cost = CostMatrix::squared_index(a.support_size());
        let exact = exact_ot_1d(&a, &b, 2.0).unwrap();
        let r = sinkhorn_distance(&a, &b, &cost, &SinkhornConfig::default()).unwrap();
        let slack = r.max_marginal_violation(&a, &b) * cost.max() * a.support_size() as f64;
        prop_assert!(r.cost >= exact - slack - 1e-9, "{} < {exact}", r.cost);
    }

    #[test]
    fn point_masses_move_by_index_distance(n in 2usize..20, i in 0usize..20, j in 0usize..20, p in 1u32..=2) {
        let (i, j) = (i % n, j % n);
        let mass = |k: usize| {
            let mut v = vec![0.0; n];
            v[k] = 1.0;
            DiscreteDistribution::new(v).unwrap()
        };
        let got = exact_ot_1d(&mass(i), &mass(j), f64::from(p)).unwrap();
        prop_assert!((got - (i.abs_diff(j) as f64).powi(p as i32)).abs() < 1e-12);
    }

    #[test]
    fn embeddings_sum_to_one(v in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let d = to_distribution(&v).unwrap();
        prop_assert!((d.mass().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(d.mass().iter().all(|&x| x > 0.0));
    }

    #[test]
    fn best_path_matches_enumeration(
        (d, sizes) in (2usize..=5).prop_flat_map(|k| (symmetric_distances(k), prop::collection::vec(1usize..30, k))),
        m in 1usize..100,
    ) {
        let got = find_best_path(&d, &sizes, m).unwrap();
        let want = brute_force_path(&d, &sizes, m);
        match (got, want) {
            (None, None) => {}
            (Some(g), Some((p, c))) => {
                prop_assert_eq!(&g.path, &p);
                prop_assert!((g.cumulative_cost - c).abs() <= 1e-9 * c.max(1.0));
                prop_assert_eq!(g.total_size, p.iter().map(|&i| sizes[i]).sum::<usize>());
            }
            (g, w) => prop_assert!(false, "{g:?} vs {w:?}"),
        }
    }

    #[test]
    fn kmeans_inertia_never_increases(points in sample_cloud(40, 3), k in 1usize..8, seed in any::<u64>()) {
        let r = kmeans(&points, k, 100, seed).unwrap();
        for w in r.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{:?}", r.inertia_history);
        }
        prop_assert_eq!(r.assignments.len(), points.len());
        prop_assert!(r.assignments.iter().all(|&a| a < k));
        prop_assert!(r.inertia >= 0.0);
    }

    #[test]
    fn medoid_matches_linear_scan(points in sample_cloud(25, 2), c in prop::collection::vec(-10.0f64..10.0, 2)) {
        let cands: Vec<Sample> = points.iter().enumerate().map(|(i, p)| Sample::new(100 - i as u64, p.clone(), 0)).collect();
        let got = snap_to_medoid(&c, &cands).unwrap();
        let d = |s: &Sample| s.features.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let best = cands.iter().map(d).fold(f64::INFINITY, f64::min);
        let want = cands
            .iter()
            .enumerate()
            .filter(|(_, s)| d(s) == best)
            .min_by_key(|(_, s)| s.id)
            .unwrap()
            .0;
        prop_assert_eq!(got, want);
    }

    #[test]
    fn dac_returns_a_subset(points in sample_cloud(60, 2), k in 2usize..5, m in 1usize..60, depth in 0usize..4) {
        let cfg = DacConfig::new(k, m, depth).unwrap();
        let out = dac(&points, &cfg, &SinkhornConfig::default(), 3).unwrap();
        prop_assert!(out.indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(out.indices.iter().all(|&i| i < points.len()));
        prop_assert!(out.levels <= depth);
        if out.levels > 0 {
            prop_assert!(out.size() >= m);
        } else {
            prop_assert_eq!(out.size(), points.len());
        }
    }

    #[test]
    fn reservoir_keeps_a_sample_of_the_stream(capacity in 1usize..30, n in 0usize..200, seed in any::<u64>()) {
        let mut buf = ShortTermBuffer::new(capacity);
        let mut rng = rng_for(seed, "prop", 0);
        for i in 0..n {
            reservoir_insert(&mut buf, Sample::new(i as u64, vec![], 0), &mut rng);
        }
        prop_assert_eq!(buf.len(), n.min(capacity));
        prop_assert_eq!(buf.seen, n as u64);
        let ids: HashSet<u64> = buf.items.iter().map(|s| s.id).collect();
        prop_assert_eq!(ids.len(), buf.len());
        prop_assert!(ids.iter().all(|&id| (id as usize) < n));
    }

    #[test]
    fn sub_buffer_matches_sort_and_take(
        proto in prop::collection::vec(-3.0f64..3.0, 5),
        cands in sample_cloud(30, 5),
        capacity in 1usize..12,
        farthest in any::<bool>(),
    ) {
        let prototype = Sample::new(1000, proto, 4);
        let pool: Vec<Sample> = cands.into_iter().enumerate().map(|(i, f)| Sample::new(i as u64, f, 4)).collect();
        let refs: Vec<&Sample> = pool.iter().collect();
        let mode = if farthest { SelectionMode::Farthest } else { SelectionMode::Nearest };
        for kind in MetricKind::ALL {
            let metric = Metric::new(kind, MetricParams::default(), 5).unwrap();
            let got = build_sub_buffer(&prototype, &refs, capacity, &metric, mode).unwrap();
            let mut ranked: Vec<(f64, u64)> = pool
                .iter()
                .map(|s| (metric_distance(kind, &prototype.features, &s.features, &MetricParams::default()).unwrap(), s.id))
                .collect();
            ranked.sort_by(|x, y| {
                let o = x.0.partial_cmp(&y.0).unwrap();
                (if farthest { o.reverse() } else { o }).then(x.1.cmp(&y.1))
            });
            let want: Vec<u64> = std::iter::once(1000).chain(ranked.iter().take(capacity - 1).map(|r| r.1)).collect();
            let ids: Vec<u64> = got.items.iter().map(|s| s.id).collect();
            prop_assert_eq!(ids, want, "{}", kind);
        }
    }

    #[test]
    fn forgetting_stays_in_unit_interval(rows in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 1..6), 1..6)) {
        prop_assert!(forgetting_curve(&rows).iter().all(|&e| (0.0..=1.0).contains(&e)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn memory_respects_the_budget(
        lambda_max in 20usize..120,
        rho in 0.0f64..=1.0,
        n_tasks in 2usize..5,
        classes in 1usize..4,
        per_class in 5usize..30,
        seed in any::<u64>(),
    ) {
        let stream = make_synthetic_stream(n_tasks, classes, per_class, 4, 3.0, seed).unwrap();
        let mut cfg = MemoryConfig::new(lambda_max, rho, n_tasks);
        cfg.metric = MetricKind::L2;
        cfg.seed = seed;
        let mut memory = DualMemory::new(cfg).unwrap();
        let mut rng = rng_for(seed, "prop-memory", 0);
        let mut last_long = 0;
        for task in stream.tasks() {
            for s in &task.samples {
                memory.observe(s.clone(), &mut rng);
            }
            let report = match memory.on_task_end(task, &mut rng) {
                Ok(r) => r,
                // a budget that cannot hold the requested prototypes is refused up front
                Err(odedm::Error::BudgetOverflow { .. }) => return Ok(()),
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            };
            prop_assert!(memory.len() <= lambda_max);
            prop_assert!(memory.long.len() >= last_long);
            prop_assert_eq!(memory.short.capacity, lambda_max - memory.long.len());
            last_long = memory.long.len();
            let counts: Vec<usize> = report.prototypes_per_class.values().copied().collect();
            prop_assert!(counts.windows(2).all(|w| w[0] == w[1]), "{:?}", counts);
        }
    }
}

#[test]
fn rebalance_trims_the_largest_class_first() {
    let mut cfg = MemoryConfig::new(10, 0.5, 3);
    cfg.metric = MetricKind::L2;
    let mut memory = DualMemory::new(cfg).unwrap();
    let mut rng = rng_for(5, "rebalance", 0);
    for i in 0..10u64 {
        memory.observe(Sample::new(i, vec![i as f64], u32::from(i >= 7)), &mut rng);
    }
    let proto = Sample::new(99, vec![0.0], 2);
    memory.long.sub_buffers.push(SubMemoryBuffer {
        class_id: 2,
        prototype: proto.clone(),
        items: vec![proto; 4],
        capacity: 4,
    });
    assert_eq!(memory.rebalance(&mut rng).unwrap(), 4);
    assert_eq!(memory.len(), 10);
    assert_eq!(memory.short.capacity, 6);
    let zeros = memory.short.items.iter().filter(|s| s.label == 0).count();
    assert_eq!(zeros, 3);
}
