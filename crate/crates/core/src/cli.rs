//! The `odedm` command line: simulations, distances, the divide-and-conquer
//! reduction, its benchmark and memory traces.
//!
//! Exit codes: 0 on success, 2 for configuration or parse errors, 3 for
//! failures while running.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rayon::prelude::*;
use serde::Serialize;

use crate::bench::{bench_prototype_selection, BenchConfig};
use crate::clustering::{dac, DacConfig};
use crate::error::Error;
use crate::manager::MemoryManager;
use crate::memory::{DualMemory, MemoryConfig, SelectionMode};
use crate::ot::{sinkhorn_distance, to_distribution, CostMatrix, Metric, MetricKind, MetricParams, SinkhornConfig};
use crate::stream::{load_manifest, make_synthetic_stream, Sample, TaskStream};
use crate::trainer::{train_online, ModelConfig, RunMetrics, TrainConfig};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "odedm", version, about = "Dual-memory rehearsal for online continual learning")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the online learner over a task stream, once per seed.
    Simulate(SimulateArgs),
    /// Sinkhorn cost between two feature vectors read from files.
    Sinkhorn(SinkhornArgs),
    /// Time prototype selection with and without the divide-and-conquer reduction.
    Bench(BenchArgs),
    /// Run the divide-and-conquer reduction on a point file.
    Dac(DacArgs),
    /// Drive the memory alone through a stream and dump its snapshot.
    Trace(TraceArgs),
}

/// `TASKSxCLASSES`, e.g. `5x2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamShape {
    pub tasks: usize,
    pub classes_per_task: usize,
}

impl FromStr for StreamShape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (t, c) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected TASKSxCLASSES, got `{s}`"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
        let shape = Self {
            tasks: parse(t)?,
            classes_per_task: parse(c)?,
        };
        if shape.tasks == 0 || shape.classes_per_task == 0 {
            return Err("tasks and classes must be positive".into());
        }
        Ok(shape)
    }
}

#[derive(Debug, Clone, Args)]
pub struct StreamArgs {
    /// Synthetic Gaussian stream shape.
    #[arg(long, default_value = "5x2", conflicts_with = "manifest")]
    pub synthetic: StreamShape,
    /// Samples per synthetic class, before the held-out split.
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Minimum distance between synthetic class means.
    #[arg(long, default_value_t = 6.0)]
    pub separation: f64,
    /// JSON stream manifest instead of a synthetic stream.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Drop every other sample of each class.
    #[arg(long)]
    pub imbalance: bool,
    #[arg(long, default_value_t = crate::stream::DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,
}

impl StreamArgs {
    fn load(&self, seed: u64) -> Result<TaskStream, Error> {
        let stream = match &self.manifest {
            Some(path) => load_manifest(path)?,
            None => make_synthetic_stream(
                self.synthetic.tasks,
                self.synthetic.classes_per_task,
                self.per_class,
                self.dim,
                self.separation,
                seed,
            )?,
        };
        let stream = if self.imbalance && self.manifest.is_none() {
            crate::stream::apply_imbalance(&stream)
        } else {
            stream
        };
        stream.with_batch_size(self.batch_size)
    }
}

#[derive(Debug, Clone, Args)]
pub struct MemoryArgs {
    /// Total memory budget.
    #[arg(long, default_value_t = 200)]
    pub buffer: usize,
    /// Long-term share of the budget, in [0, 1].
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    pub rho: f64,
    #[arg(long, default_value = "sinkhorn")]
    pub metric: MetricKind,
    #[arg(long, default_value = "nearest")]
    pub selection: SelectionMode,
    /// RBF bandwidth for `mmd_rbf`.
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Samples per sub-buffer; derived from the budget when absent.
    #[arg(long)]
    pub sub_capacity: Option<usize>,
    /// Reduce each class with divide-and-conquer before prototyping.
    #[arg(long)]
    pub dac: bool,
    #[arg(long, default_value_t = 5)]
    pub dac_k: usize,
    /// Minimum merged size; raised to k + 1 when smaller.
    #[arg(long, default_value_t = 1)]
    pub dac_m: usize,
    #[arg(long, default_value_t = 3)]
    pub dac_depth: usize,
}

impl MemoryArgs {
    fn config(&self, rho: f64, n_tasks: usize, seed: u64) -> MemoryConfig {
        let mut cfg = MemoryConfig::new(self.buffer, rho, n_tasks);
        cfg.metric = self.metric;
        cfg.metric_params.sigma = self.sigma;
        cfg.selection = self.selection;
        cfg.sub_buffer_capacity = self.sub_capacity;
        cfg.dac = self.dac.then_some(DacConfig {
            clusters: self.dac_k,
            min_merge: self.dac_m,
            depth: self.dac_depth,
        });
        cfg.seed = seed;
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// Dual memory with long-term prototypes.
    Odedm,
    /// Short-term reservoir only (long-term share forced to 0).
    Reservoir,
    /// No memory and no replay.
    None,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub stream: StreamArgs,
    #[command(flatten)]
    pub memory: MemoryArgs,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub seeds: Vec<u64>,
    /// Output directory.
    #[arg(long, env = "ODEDM_OUT_DIR", default_value = "odedm-out")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Baseline::Odedm)]
    pub baseline: Baseline,
    /// Memory samples appended to every training batch.
    #[arg(long, default_value_t = 32)]
    pub replay_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    /// Held-out fraction of every class.
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
}

#[derive(Debug, Clone, Args)]
pub struct SinkhornArgs {
    pub file_a: PathBuf,
    pub file_b: PathBuf,
    /// Absolute regularization.
    #[arg(long, conflicts_with = "reg_factor")]
    pub reg: Option<f64>,
    /// Regularization as a multiple of the largest ground cost.
    #[arg(long, default_value_t = 0.05)]
    pub reg_factor: f64,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Point file (one comma-separated vector per line); synthetic when absent.
    #[arg(long)]
    pub points: Option<PathBuf>,
    /// Synthetic point count.
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Gaussian blobs in the synthetic set.
    #[arg(long, default_value_t = 5)]
    pub blobs: usize,
    #[arg(long, default_value_t = 6.0)]
    pub separation: f64,
    /// Prototypes to select.
    #[arg(long, default_value_t = 32)]
    pub k: usize,
    /// Samples per sub-buffer.
    #[arg(long, default_value_t = 10)]
    pub capacity: usize,
    #[arg(long, default_value = "sinkhorn")]
    pub metric: MetricKind,
    #[arg(long, default_value = "nearest")]
    pub selection: SelectionMode,
    #[arg(long, default_value_t = 5)]
    pub dac_k: usize,
    #[arg(long, default_value_t = 640)]
    pub dac_m: usize,
    #[arg(long, default_value_t = 3)]
    pub dac_depth: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Also write the full report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DacArgs {
    /// Point file (one comma-separated vector per line).
    pub points: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub dac_k: usize,
    #[arg(long, default_value_t = 1)]
    pub dac_m: usize,
    #[arg(long, default_value_t = 3)]
    pub dac_depth: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TraceArgs {
    #[arg(long, default_value = "3x2")]
    pub synthetic: StreamShape,
    #[arg(long, default_value_t = 60)]
    pub per_class: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 6.0)]
    pub separation: f64,
    #[arg(long, default_value_t = crate::stream::DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,
    #[command(flatten)]
    pub memory: MemoryArgs,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Snapshot JSON path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the stream in feed order (task, batch, id, label, features...).
    #[arg(long)]
    pub dump_data: Option<PathBuf>,
}

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument { .. } | Error::DimensionMismatch { .. } | Error::Manifest { .. } | Error::Json(_) => {
                Failure::Config(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let _ = e.print();
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> i32 {
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Sinkhorn(a) => cmd_sinkhorn(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Dac(a) => cmd_dac(a),
        Command::Trace(a) => cmd_trace(a),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), Error> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(contents).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

/// Reads comma- or whitespace-separated floats, one vector per non-empty
/// line; lines starting with `#` are skipped.
pub fn read_points(path: &Path) -> Result<Vec<Vec<f64>>, Error> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .map(str::parse::<f64>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Error::manifest(format!("{}:{}", path.display(), lineno + 1), e.to_string()))?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::DimensionMismatch {
                    context: format!("{}:{}", path.display(), lineno + 1),
                    expected: first.len(),
                    actual: row.len(),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::manifest(path.display().to_string(), "no data rows"));
    }
    Ok(rows)
}

/// All floats of a file as one vector, ignoring line structure.
fn read_vector(path: &Path) -> Result<Vec<f64>, Error> {
    Ok(read_points(path)?.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, Serialize)]
struct MeanStd {
    mean: f64,
    std: f64,
}

/// Sample standard deviation; 0 for a single value.
fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Debug, Serialize)]
struct SeedSummary {
    seed: u64,
    final_class_il: f64,
    final_task_il: f64,
    final_forgetting: f64,
    boundaries: Vec<crate::trainer::BoundaryRecord>,
}

#[derive(Debug, Serialize)]
struct SimulationSummary {
    baseline: Baseline,
    tasks: usize,
    classes_per_task: usize,
    buffer: usize,
    rho: f64,
    metric: MetricKind,
    selection: SelectionMode,
    dac: Option<DacConfig>,
    replay_size: usize,
    learning_rate: f64,
    seeds: Vec<u64>,
    final_class_il: MeanStd,
    final_task_il: MeanStd,
    final_forgetting: MeanStd,
    runs: Vec<SeedSummary>,
}

struct SeedRun {
    seed: u64,
    metrics: RunMetrics,
    snapshot: Option<String>,
}

fn run_seed(args: &SimulateArgs, seed: u64) -> CliResult<SeedRun> {
    let stream = args.stream.load(seed)?;
    let (train, held_out) = stream.split_holdout(args.holdout, seed)?;
    let rho = match args.baseline {
        Baseline::Reservoir => 0.0,
        _ => args.memory.rho,
    };
    let mut memory = match args.baseline {
        Baseline::None => None,
        _ => Some(DualMemory::new(args.memory.config(rho, train.n_tasks(), seed))?),
    };
    let cfg = TrainConfig {
        model: ModelConfig {
            learning_rate: args.lr,
            seed,
            ..ModelConfig::default()
        },
        replay_size: args.replay_size,
        seed,
    };
    let (_, metrics) = train_online(&train, &held_out, memory.as_mut(), &cfg)?;
    info!(
        "seed {seed}: class-IL {:.4}, train {:.3}s, memory {:.3}s",
        metrics.final_average_class_il, metrics.train_seconds, metrics.memory_seconds
    );
    Ok(SeedRun {
        seed,
        metrics,
        snapshot: memory.map(|m| m.snapshot().to_json()),
    })
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult {
    if args.seeds.is_empty() {
        return Err(config_err("at least one seed is required"));
    }
    if !(0.0..1.0).contains(&args.holdout) || args.holdout == 0.0 {
        return Err(config_err("holdout must lie in (0,1)"));
    }
    if !(args.lr > 0.0) {
        return Err(config_err("learning rate must be positive"));
    }
    // validate the memory and stream settings before any work
    let probe = args.stream.load(args.seeds[0])?;
    if args.baseline != Baseline::None {
        args.memory.config(args.memory.rho, probe.n_tasks(), 0).validate()?;
    }
    drop(probe);

    let runs: Vec<SeedRun> = args
        .seeds
        .par_iter()
        .map(|&seed| run_seed(args, seed))
        .collect::<CliResult<_>>()?;

    fs::create_dir_all(&args.out).map_err(|source| {
        Failure::Runtime(
            Error::Io {
                path: args.out.clone(),
                source,
            }
            .to_string(),
        )
    })?;
    let mut accuracy = String::from("seed,after_task,task,class_il,task_il\n");
    let mut forgetting = String::from("seed,after_task,error\n");
    let mut histogram = String::from("seed,class,count\n");
    for run in &runs {
        let m = &run.metrics;
        for (t, (ci, ti)) in m.class_il.iter().zip(&m.task_il).enumerate() {
            for (tau, (c, k)) in ci.iter().zip(ti).enumerate() {
                let _ = writeln!(accuracy, "{},{t},{tau},{c:.6},{k:.6}", run.seed);
            }
        }
        for (t, e) in m.forgetting.iter().enumerate() {
            let _ = writeln!(forgetting, "{},{t},{e:.6}", run.seed);
        }
        for (c, n) in &m.histogram {
            let _ = writeln!(histogram, "{},{c},{n}", run.seed);
        }
    }
    let stream0 = args.stream.load(args.seeds[0])?;
    let pick = |f: fn(&RunMetrics) -> f64| -> Vec<f64> { runs.iter().map(|r| f(&r.metrics)).collect() };
    let summary = SimulationSummary {
        baseline: args.baseline,
        tasks: stream0.n_tasks(),
        classes_per_task: stream0.classes_per_task(),
        buffer: args.memory.buffer,
        rho: if args.baseline == Baseline::Reservoir { 0.0 } else { args.memory.rho },
        metric: args.memory.metric,
        selection: args.memory.selection,
        dac: args.memory.config(args.memory.rho, stream0.n_tasks(), 0).dac,
        replay_size: args.replay_size,
        learning_rate: args.lr,
        seeds: args.seeds.clone(),
        final_class_il: mean_std(&pick(|m| m.final_average_class_il)),
        final_task_il: mean_std(&pick(|m| m.final_average_task_il)),
        final_forgetting: mean_std(&pick(|m| *m.forgetting.last().expect("one task"))),
        runs: runs
            .iter()
            .map(|r| SeedSummary {
                seed: r.seed,
                final_class_il: r.metrics.final_average_class_il,
                final_task_il: r.metrics.final_average_task_il,
                final_forgetting: *r.metrics.forgetting.last().expect("one task"),
                boundaries: r.metrics.boundaries.clone(),
            })
            .collect(),
    };
    let mut summary_json = serde_json::to_string_pretty(&summary).map_err(|e| Failure::Runtime(e.to_string()))?;
    summary_json.push('\n');

    let write = |name: &str, body: &str| write_atomic(&args.out.join(name), body.as_bytes());
    write("accuracy.csv", &accuracy)?;
    write("forgetting.csv", &forgetting)?;
    write("histogram.csv", &histogram)?;
    write("summary.json", &summary_json)?;
    for run in &runs {
        if let Some(snap) = &run.snapshot {
            write(&format!("snapshot_seed{}.json", run.seed), snap)?;
        }
    }
    println!(
        "{} run(s): class-IL {:.4} ± {:.4}, task-IL {:.4} ± {:.4}; wrote {}",
        runs.len(),
        summary.final_class_il.mean,
        summary.final_class_il.std,
        summary.final_task_il.mean,
        summary.final_task_il.std,
        args.out.display()
    );
    Ok(())
}

/// The cost printed by the `sinkhorn` command.
pub fn sinkhorn_cost(x: &[f64], y: &[f64], reg: Option<f64>, reg_factor: f64) -> Result<f64, Error> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "sinkhorn input vectors".into(),
            expected: x.len(),
            actual: y.len(),
        });
    }
    let cfg = match reg {
        Some(eps) => SinkhornConfig::absolute(eps),
        None => SinkhornConfig::relative(reg_factor),
    };
    cfg.validate()?;
    let a = to_distribution(x)?;
    let b = to_distribution(y)?;
    let r = sinkhorn_distance(&a, &b, &CostMatrix::squared_index(x.len()), &cfg)?;
    if !r.converged {
        log::warn!("sinkhorn stopped after {} iterations without converging", r.iterations);
    }
    Ok(r.cost)
}

pub fn cmd_sinkhorn(args: &SinkhornArgs) -> CliResult {
    let x = read_vector(&args.file_a).map_err(config_err)?;
    let y = read_vector(&args.file_b).map_err(config_err)?;
    if x.len() != y.len() {
        return Err(config_err(format!(
            "length mismatch: {} has {} values, {} has {}",
            args.file_a.display(),
            x.len(),
            args.file_b.display(),
            y.len()
        )));
    }
    let cost = sinkhorn_cost(&x, &y, args.reg, args.reg_factor)?;
    println!("{cost:.9}");
    Ok(())
}

pub fn cmd_bench(args: &BenchArgs) -> CliResult {
    let dac_cfg = DacConfig::new(args.dac_k, args.dac_m, args.dac_depth)?;
    if args.k == 0 || args.capacity == 0 {
        return Err(config_err("k and capacity must be positive"));
    }
    let points: Vec<Sample> = match &args.points {
        Some(path) => read_points(path)
            .map_err(config_err)?
            .into_iter()
            .enumerate()
            .map(|(i, f)| Sample::new(i as u64, f, 0))
            .collect(),
        None => {
            if args.blobs == 0 || args.n == 0 {
                return Err(config_err("n and blobs must be positive"));
            }
            let per_blob = args.n.div_ceil(args.blobs);
            let s = make_synthetic_stream(1, args.blobs, per_blob, args.dim, args.separation, args.seed)?;
            s.samples()
                .take(args.n)
                .map(|x| Sample::new(x.id, x.features.clone(), 0))
                .collect()
        }
    };
    let dim = points[0].dim();
    let metric = Metric::new(args.metric, MetricParams::default(), dim)?;
    let cfg = BenchConfig {
        k: args.k,
        capacity: args.capacity,
        dac: dac_cfg,
        selection: args.selection,
        kmeans_max_iters: 100,
        seed: args.seed,
    };
    let report = bench_prototype_selection(&points, &metric, &cfg)?;
    println!("points        {}", report.points);
    println!("prototypes    {} x {}", report.k, report.capacity);
    println!("without DAC   {:.6} s", report.full_seconds);
    println!("with DAC      {:.6} s", report.dac_seconds);
    println!("speedup       {:.3}", report.speedup);
    if let Some(out) = &args.out {
        let mut json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
        json.push('\n');
        write_atomic(out, json.as_bytes())?;
    }
    Ok(())
}

pub fn cmd_dac(args: &DacArgs) -> CliResult {
    let cfg = DacConfig::new(args.dac_k, args.dac_m, args.dac_depth)?;
    let points = read_points(&args.points).map_err(config_err)?;
    let out = dac(&points, &cfg, &SinkhornConfig::default(), args.seed)?;
    let mut csv = String::from("index\n");
    for i in &out.indices {
        let _ = writeln!(csv, "{i}");
    }
    match &args.out {
        Some(path) => {
            write_atomic(path, csv.as_bytes())?;
            println!("cardinality {}", out.size());
        }
        None => {
            print!("{csv}");
            eprintln!("cardinality {}", out.size());
        }
    }
    Ok(())
}

pub fn cmd_trace(args: &TraceArgs) -> CliResult {
    let stream = make_synthetic_stream(
        args.synthetic.tasks,
        args.synthetic.classes_per_task,
        args.per_class,
        args.dim,
        args.separation,
        args.seed,
    )?
    .with_batch_size(args.batch_size)?;
    let mut manager = MemoryManager::new(args.memory.config(args.memory.rho, stream.n_tasks(), args.seed))?;
    let batches = stream.batches(args.seed);
    let mut dump = String::new();
    for task in stream.tasks() {
        for (b, batch) in batches.iter().filter(|b| b.task_index == task.task_index).enumerate() {
            let features: Vec<Vec<f64>> = batch.samples.iter().map(|s| s.features.clone()).collect();
            let labels: Vec<u32> = batch.samples.iter().map(|s| s.label).collect();
            let ids: Vec<u64> = batch.samples.iter().map(|s| s.id).collect();
            manager.observe_batch(&features, &labels, Some(&ids))?;
            for s in &batch.samples {
                let _ = write!(dump, "{},{b},{},{}", task.task_index, s.id, s.label);
                for f in &s.features {
                    let _ = write!(dump, ",{f:?}");
                }
                dump.push('\n');
            }
        }
        let features: Vec<Vec<f64>> = task.samples.iter().map(|s| s.features.clone()).collect();
        let labels: Vec<u32> = task.samples.iter().map(|s| s.label).collect();
        let ids: Vec<u64> = task.samples.iter().map(|s| s.id).collect();
        manager.end_task(&features, &labels, Some(&ids))?;
    }
    let snapshot = manager.snapshot()?;
    if let Some(path) = &args.dump_data {
        write_atomic(path, dump.as_bytes())?;
    }
    match &args.out {
        Some(path) => write_atomic(path, snapshot.as_bytes())?,
        None => print!("{snapshot}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_parsing() {
        assert_eq!(
            "5x2".parse::<StreamShape>().unwrap(),
            StreamShape {
                tasks: 5,
                classes_per_task: 2
            }
        );
        assert!("5".parse::<StreamShape>().is_err());
        assert!("0x2".parse::<StreamShape>().is_err());
    }

    #[test]
    fn spread() {
        let m = mean_std(&[1.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[4.0]).std, 0.0);
    }

    #[test]
    fn error_classes() {
        assert_eq!(Failure::from(Error::invalid("rho", "x")).exit_code(), EXIT_CONFIG);
        assert_eq!(
            Failure::from(Error::Divergence { step: 1, loss: f64::NAN }).exit_code(),
            EXIT_RUNTIME
        );
    }
}
