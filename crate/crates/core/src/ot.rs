//! Entropic optimal transport and the distances built on it.
//!
//! [`sinkhorn_distance`] runs alternating row/column scaling of the Gibbs
//! kernel `exp(-M / eps)` and reports the transport cost `<P, M>` of the
//! resulting plan. When `eps / max(M)` drops below [`LOG_DOMAIN_THRESHOLD`]
//! the same iteration runs on log-scalings to avoid kernel underflow.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor added to every coordinate by [`to_distribution`].
pub const DISTRIBUTION_FLOOR: f64 = 1e-8;
/// Relative regularization below which the log-domain solver is selected.
pub const LOG_DOMAIN_THRESHOLD: f64 = 0.01;

const SIMPLEX_TOL: f64 = 1e-9;

/// A probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    mass: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(mass: Vec<f64>) -> Result<Self> {
        if mass.is_empty() {
            return Err(Error::invalid("mass", "distribution needs at least one entry"));
        }
        if mass.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::invalid("mass", "entries must be finite and non-negative"));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid("mass", format!("entries sum to {total}, not 1")));
        }
        Ok(Self { mass })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("mass", "distribution needs at least one entry"));
        }
        Ok(Self {
            mass: vec![1.0 / n as f64; n],
        })
    }

    pub fn point_mass(n: usize, at: usize) -> Result<Self> {
        if at >= n {
            return Err(Error::invalid("mass", "point mass outside the support"));
        }
        let mut mass = vec![0.0; n];
        mass[at] = 1.0;
        Ok(Self { mass })
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn support_size(&self) -> usize {
        self.mass.len()
    }
}

/// Embeds an arbitrary real vector as a distribution over its coordinate
/// indices: shift by the minimum, add a uniform floor, normalize.
pub fn to_distribution(v: &[f64]) -> Result<DiscreteDistribution> {
    if v.is_empty() {
        return Err(Error::invalid("v", "vector must be non-empty"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("v", "vector entries must be finite"));
    }
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let mut mass: Vec<f64> = v.iter().map(|x| x - min + DISTRIBUTION_FLOOR).collect();
    let total: f64 = mass.iter().sum();
    mass.iter_mut().for_each(|m| *m /= total);
    Ok(DiscreteDistribution { mass })
}

/// Dense non-negative ground-cost matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("cost", "matrix must be non-empty"));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "cost matrix data".into(),
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if data.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::invalid("cost", "entries must be finite and non-negative"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::invalid("cost", "rows have unequal lengths"));
        }
        Self::new(r, c, rows.concat())
    }

    /// `M_ij = |i - j|^p` on the ordered support `0..n`.
    pub fn index_power(n: usize, p: f64) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push((i as f64 - j as f64).abs().powf(p));
            }
        }
        Self { rows: n, cols: n, data }
    }

    /// `M_ij = (i - j)^2`, the default ground cost for feature embeddings.
    pub fn squared_index(n: usize) -> Self {
        Self::index_power(n, 2.0)
    }

    /// Squared Euclidean distances between the points of two clouds.
    pub fn squared_euclidean(p: &PointCloud, q: &PointCloud) -> Result<Self> {
        if p.dim() != q.dim() {
            return Err(Error::DimensionMismatch {
                context: "point clouds".into(),
                expected: p.dim(),
                actual: q.dim(),
            });
        }
        let mut data = Vec::with_capacity(p.len() * q.len());
        for u in &p.points {
            for v in &q.points {
                data.push(squared_distance(u, v));
            }
        }
        Self::new(p.len(), q.len(), data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }
}

/// How the entropic regularization `eps` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularization {
    /// `eps` as given.
    Absolute(f64),
    /// `eps = factor * max(M)`.
    Relative(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stabilization {
    /// Log domain when `eps / max(M) < LOG_DOMAIN_THRESHOLD`.
    Auto,
    Standard,
    LogDomain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub reg: Regularization,
    pub max_iters: usize,
    /// Bound on the L1 marginal violation used as the stopping rule.
    pub tol: f64,
    pub stabilization: Stabilization,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            reg: Regularization::Relative(0.05),
            max_iters: 1000,
            tol: 1e-6,
            stabilization: Stabilization::Auto,
        }
    }
}

impl SinkhornConfig {
    pub fn relative(factor: f64) -> Self {
        Self {
            reg: Regularization::Relative(factor),
            ..Self::default()
        }
    }

    pub fn absolute(eps: f64) -> Self {
        Self {
            reg: Regularization::Absolute(eps),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = match self.reg {
            Regularization::Absolute(r) | Regularization::Relative(r) => r,
        };
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::invalid("reg", "regularization must be positive and finite"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters", "must be positive"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol", "must be positive"));
        }
        Ok(())
    }
}

/// A coupling of two distributions and its transport cost.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub rows: usize,
    pub cols: usize,
    pub plan: Vec<f64>,
    pub cost: f64,
}

impl TransportPlan {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.plan[i * self.cols + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.plan.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.plan.chunks(self.cols) {
            for (o, p) in out.iter_mut().zip(row) {
                *o += p;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornResult {
    pub cost: f64,
    pub plan: TransportPlan,
    pub converged: bool,
    pub iterations: usize,
    /// Resolved absolute regularization.
    pub reg: f64,
    pub log_domain: bool,
    /// L1 row-marginal violation after each full scaling sweep.
    pub error_history: Vec<f64>,
}

impl SinkhornResult {
    /// Largest absolute deviation of the plan's marginals from `a` and `b`.
    pub fn max_marginal_violation(&self, a: &DiscreteDistribution, b: &DiscreteDistribution) -> f64 {
        let rows = self.plan.row_sums();
        let cols = self.plan.col_sums();
        rows.iter()
            .zip(a.mass())
            .chain(cols.iter().zip(b.mass()))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }
}

/// Precomputed Gibbs kernel for one cost matrix.
#[derive(Debug, Clone, PartialEq)]
struct Kernel {
    eps: f64,
    log_domain: bool,
    /// `exp(-M/eps)` in the standard domain, `-M/eps` in the log domain.
    values: Vec<f64>,
}

impl Kernel {
    fn build(cost: &CostMatrix, cfg: &SinkhornConfig) -> Result<Option<Self>> {
        cfg.validate()?;
        let max = cost.max();
        let eps = match cfg.reg {
            Regularization::Absolute(e) => e,
            Regularization::Relative(f) => f * max,
        };
        if max == 0.0 {
            // every coupling is free
            return Ok(None);
        }
        let log_domain = match cfg.stabilization {
            Stabilization::Auto => eps / max < LOG_DOMAIN_THRESHOLD,
            Stabilization::Standard => false,
            Stabilization::LogDomain => true,
        };
        let values = if log_domain {
            cost.as_slice().iter().map(|m| -m / eps).collect()
        } else {
            cost.as_slice().iter().map(|m| (-m / eps).exp()).collect()
        };
        Ok(Some(Self {
            eps,
            log_domain,
            values,
        }))
    }
}

fn check_shapes(a: &DiscreteDistribution, b: &DiscreteDistribution, cost: &CostMatrix) -> Result<()> {
    if a.support_size() != cost.rows() {
        return Err(Error::DimensionMismatch {
            context: "source distribution vs cost rows".into(),
            expected: cost.rows(),
            actual: a.support_size(),
        });
    }
    if b.support_size() != cost.cols() {
        return Err(Error::DimensionMismatch {
            context: "target distribution vs cost columns".into(),
            expected: cost.cols(),
            actual: b.support_size(),
        });
    }
    Ok(())
}

/// Entropic transport between `a` and `b` under ground cost `cost`.
///
/// Returns the cost `<P, M>` of the scaled plan. Hitting `max_iters` is not
/// an error: the last iterate is returned with `converged == false`.
pub fn sinkhorn_distance(
    a: &DiscreteDistribution,
    b: &DiscreteDistribution,
    cost: &CostMatrix,
    cfg: &SinkhornConfig,
) -> Result<SinkhornResult> {
    check_shapes(a, b, cost)?;
    let kernel = Kernel::build(cost, cfg)?;
    solve(a.mass(), b.mass(), cost, kernel.as_ref(), cfg, true)
}

fn solve(
    a: &[f64],
    b: &[f64],
    cost: &CostMatrix,
    kernel: Option<&Kernel>,
    cfg: &SinkhornConfig,
    record: bool,
) -> Result<SinkhornResult> {
    let (n, m) = (cost.rows(), cost.cols());
    let Some(kernel) = kernel else {
        let plan: Vec<f64> = a.iter().flat_map(|ai| b.iter().map(move |bj| ai * bj)).collect();
        return Ok(SinkhornResult {
            cost: 0.0,
            plan: TransportPlan {
                rows: n,
                cols: m,
                plan,
                cost: 0.0,
            },
            converged: true,
            iterations: 0,
            reg: 0.0,
            log_domain: false,
            error_history: Vec::new(),
        });
    };
    let (plan, iterations, converged, history) = if kernel.log_domain {
        scale_log(a, b, n, m, kernel, cfg, record)
    } else {
        scale_standard(a, b, n, m, kernel, cfg, record)?
    };
    if plan.iter().any(|p| !p.is_finite()) {
        return Err(Error::NumericalInstability { reg: kernel.eps });
    }
    let total: f64 = plan.iter().zip(cost.as_slice()).map(|(p, c)| p * c).sum();
    Ok(SinkhornResult {
        cost: total,
        plan: TransportPlan {
            rows: n,
            cols: m,
            plan,
            cost: total,
        },
        converged,
        iterations,
        reg: kernel.eps,
        log_domain: kernel.log_domain,
        error_history: history,
    })
}

type Scaled = (Vec<f64>, usize, bool, Vec<f64>);

fn scale_standard(
    a: &[f64],
    b: &[f64],
    n: usize,
    m: usize,
    kernel: &Kernel,
    cfg: &SinkhornConfig,
    record: bool,
) -> Result<Scaled> {
    let k = &kernel.values;
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut kv = vec![0.0; n];
    let mut ktu = vec![0.0; m];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    let unstable = || Error::NumericalInstability { reg: kernel.eps };

    for it in 0..=cfg.max_iters {
        for (i, out) in kv.iter_mut().enumerate() {
            *out = k[i * m..(i + 1) * m].iter().zip(&v).map(|(x, y)| x * y).sum();
        }
        if it > 0 {
            // columns are exact after the v-update; the violation lives in the rows
            let err: f64 = u.iter().zip(&kv).zip(a).map(|((ui, kvi), ai)| (ui * kvi - ai).abs()).sum();
            if !err.is_finite() {
                return Err(unstable());
            }
            if record {
                history.push(err);
            }
            iterations = it;
            if err < cfg.tol {
                converged = true;
                break;
            }
            if it == cfg.max_iters {
                break;
            }
        }
        for ((ui, ai), kvi) in u.iter_mut().zip(a).zip(&kv) {
            *ui = if *ai == 0.0 {
                0.0
            } else if *kvi > 0.0 {
                ai / kvi
            } else {
                return Err(unstable());
            };
        }
        ktu.iter_mut().for_each(|x| *x = 0.0);
        for (i, ui) in u.iter().enumerate() {
            if *ui == 0.0 {
                continue;
            }
            for (out, kij) in ktu.iter_mut().zip(&k[i * m..(i + 1) * m]) {
                *out += kij * ui;
            }
        }
        for ((vj, bj), ktuj) in v.iter_mut().zip(b).zip(&ktu) {
            *vj = if *bj == 0.0 {
                0.0
            } else if *ktuj > 0.0 && ktuj.is_finite() {
                bj / ktuj
            } else {
                return Err(unstable());
            };
        }
    }
    let mut plan = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            plan.push(u[i] * k[i * m + j] * v[j]);
        }
    }
    Ok((plan, iterations, converged, history))
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn scale_log(
    a: &[f64],
    b: &[f64],
    n: usize,
    m: usize,
    kernel: &Kernel,
    cfg: &SinkhornConfig,
    record: bool,
) -> Scaled {
    let lk = &kernel.values;
    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let mut lu = vec![0.0; n];
    let mut lv = vec![0.0; m];
    let mut lkv = vec![0.0; n];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..=cfg.max_iters {
        for (i, out) in lkv.iter_mut().enumerate() {
            let row = &lk[i * m..(i + 1) * m];
            *out = log_sum_exp(row.iter().zip(&lv).map(|(k, v)| k + v));
        }
        if it > 0 {
            let err: f64 = lu
                .iter()
                .zip(&lkv)
                .zip(a)
                .map(|((u, kv), ai)| ((u + kv).exp() - ai).abs())
                .sum();
            if record {
                history.push(err);
            }
            iterations = it;
            if err < cfg.tol {
                converged = true;
                break;
            }
            if it == cfg.max_iters {
                break;
            }
        }
        for ((u, la), kv) in lu.iter_mut().zip(&log_a).zip(&lkv) {
            *u = if *la == f64::NEG_INFINITY { f64::NEG_INFINITY } else { la - kv };
        }
        for (j, v) in lv.iter_mut().enumerate() {
            let col = log_sum_exp((0..n).map(|i| lk[i * m + j] + lu[i]));
            *v = if log_b[j] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                log_b[j] - col
            };
        }
    }
    let mut plan = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            let e = lu[i] + lk[i * m + j] + lv[j];
            plan.push(if e == f64::NEG_INFINITY { 0.0 } else { e.exp() });
        }
    }
    (plan, iterations, converged, history)
}

/// Exact optimal transport cost between two distributions on the ordered
/// support `0..n` with cost `|i - j|^p`, `p >= 1`, via the monotone
/// (quantile) coupling.
pub fn exact_ot_1d(a: &DiscreteDistribution, b: &DiscreteDistribution, p: f64) -> Result<f64> {
    if a.support_size() != b.support_size() {
        return Err(Error::DimensionMismatch {
            context: "exact_ot_1d supports".into(),
            expected: a.support_size(),
            actual: b.support_size(),
        });
    }
    if !(p >= 1.0) {
        return Err(Error::invalid("p", "exponent must be at least 1"));
    }
    let (a, b) = (a.mass(), b.mass());
    let n = a.len();
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0], b[0]);
    let mut total = 0.0;
    while i < n && j < n {
        let moved = ra.min(rb);
        total += moved * (i as f64 - j as f64).abs().powf(p);
        ra -= moved;
        rb -= moved;
        if ra <= 0.0 {
            i += 1;
            if i < n {
                ra = a[i];
            }
        }
        if rb <= 0.0 {
            j += 1;
            if j < n {
                rb = b[j];
            }
        }
    }
    Ok(total)
}

/// An equally weighted set of points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::invalid("points", "point cloud must be non-empty"));
        };
        let d = first.len();
        if let Some(bad) = points.iter().find(|p| p.len() != d) {
            return Err(Error::DimensionMismatch {
                context: "point cloud".into(),
                expected: d,
                actual: bad.len(),
            });
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }
}

/// Sinkhorn cost between two uniformly weighted clouds under squared
/// Euclidean ground cost.
pub fn sinkhorn_point_clouds(p: &PointCloud, q: &PointCloud, cfg: &SinkhornConfig) -> Result<f64> {
    let cost = CostMatrix::squared_euclidean(p, q)?;
    let a = vec![1.0 / p.len() as f64; p.len()];
    let b = vec![1.0 / q.len() as f64; q.len()];
    let kernel = Kernel::build(&cost, cfg)?;
    Ok(solve(&a, &b, &cost, kernel.as_ref(), cfg, false)?.cost)
}

pub(crate) fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Distances available for sample selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    L1,
    L2,
    MmdRbf,
    Sinkhorn,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [MetricKind::L1, MetricKind::L2, MetricKind::MmdRbf, MetricKind::Sinkhorn];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::L1 => "l1",
            MetricKind::L2 => "l2",
            MetricKind::MmdRbf => "mmd_rbf",
            MetricKind::Sinkhorn => "sinkhorn",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "l1" => Ok(MetricKind::L1),
            "l2" => Ok(MetricKind::L2),
            "mmd" | "mmd_rbf" => Ok(MetricKind::MmdRbf),
            "sinkhorn" => Ok(MetricKind::Sinkhorn),
            other => Err(Error::invalid("metric", format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricParams {
    /// RBF bandwidth for the MMD distance.
    pub sigma: f64,
    pub sinkhorn: SinkhornConfig,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

/// One-off distance between two feature vectors.
pub fn metric_distance(kind: MetricKind, x: &[f64], y: &[f64], params: &MetricParams) -> Result<f64> {
    Metric::new(kind, *params, x.len())?.distance(x, y)
}

/// A distance bound to one feature dimension, with the Sinkhorn kernel
/// precomputed so repeated evaluations only pay for the scaling loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    kind: MetricKind,
    params: MetricParams,
    dim: usize,
    ground: Option<(CostMatrix, Option<Kernel>)>,
}

impl Metric {
    pub fn new(kind: MetricKind, params: MetricParams, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim", "must be positive"));
        }
        if kind == MetricKind::MmdRbf && !(params.sigma > 0.0) {
            return Err(Error::invalid("sigma", "RBF bandwidth must be positive"));
        }
        let ground = if kind == MetricKind::Sinkhorn {
            let cost = CostMatrix::squared_index(dim);
            let kernel = Kernel::build(&cost, &params.sinkhorn)?;
            Some((cost, kernel))
        } else {
            None
        };
        Ok(Self {
            kind,
            params,
            dim,
            ground,
        })
    }

    pub fn kind(&self) -> MetricKind {
        self.kind
    }

    pub fn distance(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        for v in [x, y] {
            if v.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    context: format!("{} distance", self.kind),
                    expected: self.dim,
                    actual: v.len(),
                });
            }
        }
        Ok(match self.kind {
            MetricKind::L1 => x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum(),
            MetricKind::L2 => squared_distance(x, y).sqrt(),
            MetricKind::MmdRbf => {
                let s2 = self.params.sigma * self.params.sigma;
                let k = (-squared_distance(x, y) / (2.0 * s2)).exp();
                (2.0 - 2.0 * k).max(0.0).sqrt()
            }
            MetricKind::Sinkhorn => {
                let (cost, kernel) = self.ground.as_ref().expect("sinkhorn ground");
                let a = to_distribution(x)?;
                let b = to_distribution(y)?;
                solve(a.mass(), b.mass(), cost, kernel.as_ref(), &self.params.sinkhorn, false)?.cost
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dist(v: &[f64]) -> DiscreteDistribution {
        DiscreteDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn to_distribution_cases() {
        let u = to_distribution(&[0.0, 0.0, 0.0]).unwrap();
        for m in u.mass() {
            assert_abs_diff_eq!(*m, 1.0 / 3.0, epsilon = 1e-15);
        }
        let d = to_distribution(&[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(d.mass()[0], 1.0, epsilon = 2e-8);
        assert_abs_diff_eq!(d.mass()[1], 0.0, epsilon = 2e-8);
        assert!(to_distribution(&[]).is_err());
        assert!(to_distribution(&[f64::NAN]).is_err());
    }

    #[test]
    fn distribution_validation() {
        assert!(DiscreteDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(DiscreteDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(DiscreteDistribution::new(vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn identity_transport_is_cheap() {
        let a = dist(&[0.1, 0.2, 0.3, 0.4]);
        let cost = CostMatrix::squared_index(4);
        let r = sinkhorn_distance(&a, &a, &cost, &SinkhornConfig::default()).unwrap();
        assert!(r.converged);
        assert!(r.cost <= r.reg * 4f64.ln() + 1e-6, "cost {} reg {}", r.cost, r.reg);
        for i in 0..4 {
            for j in 0..4 {
                assert!(r.plan.get(i, i) >= r.plan.get(i, j));
            }
        }
    }

    #[test]
    fn crossing_mass_costs_one() {
        let a = dist(&[1.0, 0.0]);
        let b = dist(&[0.0, 1.0]);
        let cost = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let r = sinkhorn_distance(&a, &b, &cost, &SinkhornConfig::absolute(1e-3)).unwrap();
        assert!(r.log_domain);
        assert!((0.999..=1.001).contains(&r.cost), "{}", r.cost);
    }

    #[test]
    fn standard_domain_underflow_is_reported() {
        let a = dist(&[0.5, 0.5]);
        let b = dist(&[0.5, 0.5]);
        let cost = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        // exp(-1/eps) underflows: the kernel is the identity, fine for a = b
        // but a dead end once mass has to cross
        let a2 = dist(&[1.0, 0.0]);
        let b2 = dist(&[0.0, 1.0]);
        let cfg = SinkhornConfig {
            stabilization: Stabilization::Standard,
            ..SinkhornConfig::absolute(1e-4)
        };
        assert!(sinkhorn_distance(&a, &b, &cost, &cfg).is_ok());
        let err = sinkhorn_distance(&a2, &b2, &cost, &cfg).unwrap_err();
        assert!(matches!(err, Error::NumericalInstability { .. }));
    }

    #[test]
    fn non_convergence_is_flagged() {
        let a = dist(&[0.7, 0.2, 0.1]);
        let b = dist(&[0.1, 0.2, 0.7]);
        let cost = CostMatrix::squared_index(3);
        let cfg = SinkhornConfig {
            max_iters: 1,
            tol: 1e-14,
            ..SinkhornConfig::relative(0.02)
        };
        let r = sinkhorn_distance(&a, &b, &cost, &cfg).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn shape_mismatch() {
        let a = dist(&[0.5, 0.5]);
        let cost = CostMatrix::squared_index(3);
        assert!(sinkhorn_distance(&a, &a, &cost, &SinkhornConfig::default()).is_err());
    }

    #[test]
    fn exact_1d_cases() {
        let a = DiscreteDistribution::point_mass(4, 0).unwrap();
        let b = DiscreteDistribution::point_mass(4, 3).unwrap();
        assert_abs_diff_eq!(exact_ot_1d(&a, &b, 2.0).unwrap(), 9.0);
        assert_abs_diff_eq!(exact_ot_1d(&a, &b, 1.0).unwrap(), 3.0);
        assert_abs_diff_eq!(exact_ot_1d(&a, &a, 2.0).unwrap(), 0.0);
        let a = dist(&[0.5, 0.5, 0.0]);
        let b = dist(&[0.0, 0.5, 0.5]);
        assert_abs_diff_eq!(exact_ot_1d(&a, &b, 2.0).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn single_point_clouds() {
        let p = PointCloud::new(vec![vec![0.0, 0.0]]).unwrap();
        let q = PointCloud::new(vec![vec![3.0, 4.0]]).unwrap();
        let c = sinkhorn_point_clouds(&p, &q, &SinkhornConfig::default()).unwrap();
        assert_abs_diff_eq!(c, 25.0, epsilon = 1e-3);
    }

    #[test]
    fn identical_clouds() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 2.0], vec![-1.0, 0.5]];
        let p = PointCloud::new(pts).unwrap();
        let cfg = SinkhornConfig::default();
        let cost = CostMatrix::squared_euclidean(&p, &p).unwrap();
        let c = sinkhorn_point_clouds(&p, &p, &cfg).unwrap();
        let eps = 0.05 * cost.max();
        assert!(c <= eps * 3f64.ln() + 1e-6);
        // all points coincide: nothing to move
        let same = PointCloud::new(vec![vec![1.0, 1.0]; 3]).unwrap();
        assert_eq!(sinkhorn_point_clouds(&same, &same, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn cloud_validation() {
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::new(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn metric_cases() {
        let p = MetricParams::default();
        assert_eq!(metric_distance(MetricKind::L2, &[1.0, 2.0], &[1.0, 2.0], &p).unwrap(), 0.0);
        assert_eq!(metric_distance(MetricKind::L1, &[0.0, 0.0], &[1.0, 1.0], &p).unwrap(), 2.0);
        for sigma in [0.1, 1.0, 10.0] {
            let q = MetricParams { sigma, ..p };
            assert_eq!(metric_distance(MetricKind::MmdRbf, &[3.0, -1.0], &[3.0, -1.0], &q).unwrap(), 0.0);
        }
        let mmd = metric_distance(MetricKind::MmdRbf, &[0.0], &[1.0], &p).unwrap();
        assert_abs_diff_eq!(mmd, (2.0 - 2.0 * (-0.5f64).exp()).sqrt(), epsilon = 1e-15);
        assert!(metric_distance(MetricKind::L1, &[0.0], &[0.0, 1.0], &p).is_err());
        let bad = MetricParams { sigma: 0.0, ..p };
        assert!(metric_distance(MetricKind::MmdRbf, &[0.0], &[0.0], &bad).is_err());
    }

    #[test]
    fn sinkhorn_metric_matches_direct_call() {
        let x = [0.3, 1.2, -0.4, 2.2, 0.0];
        let y = [1.0, -0.2, 0.7, 0.1, 0.9];
        let p = MetricParams::default();
        let via_metric = metric_distance(MetricKind::Sinkhorn, &x, &y, &p).unwrap();
        let direct = sinkhorn_distance(
            &to_distribution(&x).unwrap(),
            &to_distribution(&y).unwrap(),
            &CostMatrix::squared_index(5),
            &p.sinkhorn,
        )
        .unwrap()
        .cost;
        assert_eq!(via_metric, direct);
    }

    #[test]
    fn metric_names_round_trip() {
        for k in MetricKind::ALL {
            assert_eq!(k.name().parse::<MetricKind>().unwrap(), k);
        }
        assert!("cosine".parse::<MetricKind>().is_err());
    }
}
