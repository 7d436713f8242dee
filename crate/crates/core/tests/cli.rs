use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use odedm::cli::sinkhorn_cost;
use odedm::rng::rng_for;
use rand::Rng;
use tempfile::TempDir;

fn odedm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odedm"))
        .args(args)
        .env_remove("ODEDM_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_owned()
}

fn simulate(out: &Path) -> Output {
    odedm(&[
        "simulate",
        "--synthetic",
        "5x2",
        "--per-class",
        "40",
        "--rho",
        "0.5",
        "--buffer",
        "40",
        "--seeds",
        "1,2,3",
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn simulate_writes_artifacts() {
    let dir = TempDir::new().unwrap();
    let o = simulate(dir.path());
    assert!(o.status.success(), "{}", stderr(&o));

    let accuracy = fs::read_to_string(dir.path().join("accuracy.csv")).unwrap();
    assert_eq!(accuracy.lines().next(), Some("seed,after_task,task,class_il,task_il"));
    // 15 lower-triangular entries per seed
    assert_eq!(accuracy.lines().count(), 1 + 3 * 15);
    let forgetting = fs::read_to_string(dir.path().join("forgetting.csv")).unwrap();
    assert_eq!(forgetting.lines().next(), Some("seed,after_task,error"));
    assert_eq!(forgetting.lines().count(), 1 + 3 * 5);
    let histogram = fs::read_to_string(dir.path().join("histogram.csv")).unwrap();
    assert_eq!(histogram.lines().next(), Some("seed,class,count"));
    for seed in ["1", "2", "3"] {
        let total: usize = histogram
            .lines()
            .skip(1)
            .filter(|l| l.starts_with(&format!("{seed},")))
            .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
            .sum();
        assert!(total <= 40, "seed {seed}: {total}");
    }

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let text = summary.to_string();
    assert!(text.contains("mean") && text.contains("std"), "{text}");
    for seed in 1..=3 {
        assert!(dir.path().join(format!("snapshot_seed{seed}.json")).exists());
    }
}

#[test]
fn simulate_is_reproducible() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    assert!(simulate(a.path()).status.success());
    assert!(simulate(b.path()).status.success());
    for name in ["accuracy.csv", "forgetting.csv", "histogram.csv", "summary.json"] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs");
    }
}

#[test]
fn bad_rho_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let o = odedm(&["simulate", "--rho", "1.5", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("rho must lie in [0,1]"), "{}", stderr(&o));
    assert!(!dir.path().join("accuracy.csv").exists());
}

#[test]
fn sinkhorn_command() {
    let dir = TempDir::new().unwrap();
    let same = write(dir.path(), "a.txt", "0.1 0.4 0.2 0.3\n");
    let o = odedm(&["sinkhorn", &same, &same]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cost: f64 = stdout(&o).trim().parse().unwrap();
    // eps = 0.05 * max cost on 4 bins
    let eps = 0.05 * 9.0;
    assert!(cost <= eps * 4f64.ln() + 1e-6, "{cost}");
    assert_eq!(stdout(&o).trim().split('.').nth(1).unwrap().len(), 9);

    let x = write(dir.path(), "x.txt", "1,0\n");
    let y = write(dir.path(), "y.txt", "0,1\n");
    let o = odedm(&["sinkhorn", &x, &y, "--reg", "0.001"]);
    let cost: f64 = stdout(&o).trim().parse().unwrap();
    assert!((cost - 1.0).abs() < 1e-3, "{cost}");

    let mut rng = rng_for(1, "cli-sinkhorn", 0);
    let u: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
    let v: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
    let fmt = |w: &[f64]| w.iter().map(|f| format!("{f:?}")).collect::<Vec<_>>().join(" ");
    let (pu, pv) = (write(dir.path(), "u.txt", &fmt(&u)), write(dir.path(), "v.txt", &fmt(&v)));
    let o = odedm(&["sinkhorn", &pu, &pv]);
    let want = sinkhorn_cost(&u, &v, None, 0.05).unwrap();
    assert_eq!(stdout(&o).trim(), format!("{want:.9}"));

    let short = write(dir.path(), "short.txt", "1 2 3\n");
    let o = odedm(&["sinkhorn", &same, &short]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("length mismatch"), "{}", stderr(&o));
}

fn indices(csv: &str) -> Vec<usize> {
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("index"));
    lines.map(|l| l.parse().unwrap()).collect()
}

#[test]
fn dac_command() {
    let dir = TempDir::new().unwrap();
    let mut rng = rng_for(2, "cli-dac", 0);
    let mut body = String::new();
    for (cx, n) in [(0.0, 10), (3.0, 10), (40.0, 10)] {
        for _ in 0..n {
            body.push_str(&format!("{},{}\n", cx + rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)));
        }
    }
    let points = write(dir.path(), "points.csv", &body);
    let all: Vec<usize> = (0..30).collect();

    let o = odedm(&["dac", &points, "--dac-depth", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(indices(&stdout(&o)), all);
    assert!(stderr(&o).contains("cardinality 30"));

    let o = odedm(&["dac", &points, "--dac-k", "3", "--dac-m", "31", "--dac-depth", "2"]);
    assert_eq!(indices(&stdout(&o)), all);

    let out = dir.path().join("merged.csv");
    let o = odedm(&[
        "dac",
        &points,
        "--dac-k",
        "3",
        "--dac-m",
        "15",
        "--dac-depth",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "cardinality 20");
    assert_eq!(indices(&fs::read_to_string(&out).unwrap()), (0..20).collect::<Vec<_>>());

    let broken = write(dir.path(), "broken.csv", "1,2\n3,oops\n");
    let o = odedm(&["dac", &broken]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_small() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("bench.json");
    let args = [
        "bench", "--n", "200", "--dim", "4", "--k", "4", "--capacity", "5", "--dac-m", "40", "--out",
    ];
    let o = odedm(&[&args[..], &[out.to_str().unwrap()]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("speedup"));
    let first: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(first["points"], 200);

    assert!(odedm(&[&args[..], &[out.to_str().unwrap()]].concat()).status.success());
    let second: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(first["full_selection"], second["full_selection"]);
}

#[test]
fn trace_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str| {
        let path = dir.path().join(name);
        let o = odedm(&["trace", "--seed", "3", "--buffer", "30", "--out", path.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read_to_string(path).unwrap()
    };
    let a = run("a.json");
    assert_eq!(a, run("b.json"));
    let snap: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert!(snap["total"].as_u64().unwrap() <= 30);
}
