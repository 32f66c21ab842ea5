//! Optimal transport dataset distance between labeled feature sets.
//!
//! The ground cost between two labeled points is the squared Euclidean
//! feature distance plus the squared 2-Wasserstein distance between the
//! Gaussian approximations of their classes. The dataset distance is the
//! square root of the optimal transport cost under uniform marginals.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Feature vectors paired with class labels, plus where they came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledFeatureSet {
    pub dim: usize,
    /// Row-major `n x dim`.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub block_id: usize,
    pub dataset_id: String,
    pub seed: u64,
}

const DUMP_MAGIC: &[u8; 8] = b"BSFEAT01";

impl LabeledFeatureSet {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::Dimension(format!(
                "{} values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("feature set contains non-finite values".into()));
        }
        Ok(LabeledFeatureSet {
            dim,
            features,
            labels,
            block_id: 0,
            dataset_id: String::new(),
            seed: 0,
        })
    }

    pub fn with_provenance(mut self, block_id: usize, dataset_id: &str, seed: u64) -> Self {
        self.block_id = block_id;
        self.dataset_id = dataset_id.to_string();
        self.seed = seed;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for &l in &self.labels {
            *m.entry(l).or_default() += 1;
        }
        m
    }

    /// Every feature multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        LabeledFeatureSet {
            features: self.features.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }

    /// Every row shifted by `t`.
    pub fn translated(&self, t: &[f64]) -> Self {
        assert_eq!(t.len(), self.dim);
        LabeledFeatureSet {
            features: self
                .features
                .iter()
                .enumerate()
                .map(|(k, v)| v + t[k % self.dim])
                .collect(),
            ..self.clone()
        }
    }

    /// Mean over features of the per-feature population variance.
    pub fn mean_feature_variance(&self) -> f64 {
        let n = self.len() as f64;
        if n == 0.0 {
            return 0.0;
        }
        let mut total = 0.0;
        for k in 0..self.dim {
            let mean = (0..self.len()).map(|i| self.row(i)[k]).sum::<f64>() / n;
            total += (0..self.len()).map(|i| (self.row(i)[k] - mean).powi(2)).sum::<f64>() / n;
        }
        total / self.dim as f64
    }

    /// Binary dump: magic, little-endian header
    /// `(n_samples u64, feature_dim u64, block_id u64, seed u64,
    /// dataset_id len u64 + utf8 bytes)`, then `n x dim` f32 features
    /// row-major and `n` u32 labels.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(64 + self.features.len() * 4 + self.len() * 4);
        out.extend_from_slice(DUMP_MAGIC);
        for v in [
            self.len() as u64,
            self.dim as u64,
            self.block_id as u64,
            self.seed,
            self.dataset_id.len() as u64,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(self.dataset_id.as_bytes());
        for v in &self.features {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&(*l as u32).to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn read_dump(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = || Error::Format(format!("{}: not a feature-set dump", path.display()));
        if bytes.len() < 48 || &bytes[..8] != DUMP_MAGIC {
            return Err(bad());
        }
        let word = |k: usize| u64::from_le_bytes(bytes[8 + 8 * k..16 + 8 * k].try_into().expect("8 bytes"));
        let (n, dim, block_id, seed, id_len) = (
            word(0) as usize,
            word(1) as usize,
            word(2) as usize,
            word(3),
            word(4) as usize,
        );
        let mut pos = 48;
        let expected = pos + id_len + 4 * n * dim + 4 * n;
        if bytes.len() != expected {
            return Err(bad());
        }
        let dataset_id = String::from_utf8(bytes[pos..pos + id_len].to_vec()).map_err(|_| bad())?;
        pos += id_len;
        let f32s = |start: usize, count: usize| -> Vec<[u8; 4]> {
            (0..count)
                .map(|k| bytes[start + 4 * k..start + 4 * k + 4].try_into().expect("4 bytes"))
                .collect()
        };
        let features = f32s(pos, n * dim)
            .into_iter()
            .map(|b| f32::from_le_bytes(b) as f64)
            .collect();
        pos += 4 * n * dim;
        let labels = f32s(pos, n)
            .into_iter()
            .map(|b| u32::from_le_bytes(b) as usize)
            .collect();
        Ok(LabeledFeatureSet::new(features, dim, labels)?.with_provenance(block_id, &dataset_id, seed))
    }
}

/// Gaussian approximation of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMoments {
    pub classes: BTreeMap<usize, Gaussian>,
}

/// Per-class sample mean and sample covariance (denominator `n - 1`) plus
/// `lambda * I`.
pub fn class_moments(fs: &LabeledFeatureSet, lambda: f64) -> Result<ClassMoments> {
    let d = fs.dim;
    let mut rows: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in fs.labels.iter().enumerate() {
        rows.entry(l).or_default().push(i);
    }
    let mut classes = BTreeMap::new();
    for (c, idx) in rows {
        if idx.len() < 2 {
            return Err(Error::Moments { class: c, count: idx.len() });
        }
        // sort by row content so the sums do not depend on row order
        let mut pts: Vec<&[f64]> = idx.iter().map(|&i| fs.row(i)).collect();
        pts.sort_by(|a, b| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let n = pts.len() as f64;
        let mut mean = DVector::zeros(d);
        for p in &pts {
            for k in 0..d {
                mean[k] += p[k];
            }
        }
        mean /= n;
        let mut cov = DMatrix::zeros(d, d);
        for p in &pts {
            for a in 0..d {
                let da = p[a] - mean[a];
                for b in a..d {
                    cov[(a, b)] += da * (p[b] - mean[b]);
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = cov[(a, b)] / (n - 1.0);
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
            cov[(a, a)] += lambda;
        }
        classes.insert(c, Gaussian { mean, cov });
    }
    Ok(ClassMoments { classes })
}

fn check_psd(s: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if !s.is_square() {
        return Err(Error::Dimension("covariance must be square".into()));
    }
    let scale = s.amax().max(1.0);
    if (s - s.transpose()).amax() > 1e-9 * scale {
        return Err(Error::Domain("covariance is not symmetric".into()));
    }
    let eig = s.clone().symmetric_eigen();
    if eig.eigenvalues.min() < -1e-9 * scale {
        return Err(Error::Domain(format!(
            "covariance is not positive semi-definite (eigenvalue {})",
            eig.eigenvalues.min()
        )));
    }
    Ok(eig)
}

fn psd_sqrt(eig: &SymmetricEigen<f64, nalgebra::Dyn>) -> DMatrix<f64> {
    let q = &eig.eigenvectors;
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    q * DMatrix::from_diagonal(&roots) * q.transpose()
}

/// Squared 2-Wasserstein distance between two Gaussians, clamped at 0.
pub fn gaussian_w2_squared(m1: &DVector<f64>, s1: &DMatrix<f64>, m2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    if m1.len() != m2.len() || s1.nrows() != m1.len() || s2.nrows() != m2.len() {
        return Err(Error::Dimension("gaussian dimensions differ".into()));
    }
    check_psd(s1)?;
    let e2 = check_psd(s2)?;
    if m1 == m2 && s1 == s2 {
        return Ok(0.0);
    }
    let r = psd_sqrt(&e2);
    let mut cross = &r * s1 * &r;
    cross = (&cross + cross.transpose()) * 0.5;
    let root_trace: f64 = cross.symmetric_eigenvalues().iter().map(|v| v.max(0.0).sqrt()).sum();
    let dm = (m1 - m2).norm_squared();
    Ok((dm + s1.trace() + s2.trace() - 2.0 * root_trace).max(0.0))
}

/// 2-Wasserstein distance between two Gaussians.
pub fn gaussian_w2(m1: &DVector<f64>, s1: &DMatrix<f64>, m2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    Ok(gaussian_w2_squared(m1, s1, m2, s2)?.sqrt())
}

/// Dense row-major cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        CostMatrix { rows, cols, data }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// `cost(i, j) = |x_i - y_j|^2 + W2(class(i), class(j))^2`. Label-pair
/// distances are computed once per call.
pub fn pairwise_cost(
    a: &LabeledFeatureSet,
    b: &LabeledFeatureSet,
    ma: &ClassMoments,
    mb: &ClassMoments,
) -> Result<CostMatrix> {
    if a.dim != b.dim {
        return Err(Error::Dimension(format!(
            "feature dimensions differ: {} vs {}",
            a.dim, b.dim
        )));
    }
    let mut label_cost: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (&ca, ga) in &ma.classes {
        for (&cb, gb) in &mb.classes {
            label_cost.insert((ca, cb), gaussian_w2_squared(&ga.mean, &ga.cov, &gb.mean, &gb.cov)?);
        }
    }
    let lookup = |ca: usize, cb: usize| -> Result<f64> {
        label_cost
            .get(&(ca, cb))
            .copied()
            .ok_or_else(|| Error::Contract(format!("no moments for label pair ({ca}, {cb})")))
    };
    let row_costs: Vec<Result<Vec<f64>>> = par::map_range(a.len(), |i| {
        let x = a.row(i);
        (0..b.len())
            .map(|j| {
                let y = b.row(j);
                let d2: f64 = x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum();
                Ok(d2 + lookup(a.labels[i], b.labels[j])?)
            })
            .collect()
    });
    let mut data = Vec::with_capacity(a.len() * b.len());
    for r in row_costs {
        data.extend(r?);
    }
    Ok(CostMatrix::new(a.len(), b.len(), data))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub rows: usize,
    pub cols: usize,
    pub plan: Vec<f64>,
    /// `<plan, cost>`, without any entropy term.
    pub total_cost: f64,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.plan[i * self.cols..(i + 1) * self.cols].iter().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self.plan[i * self.cols + j]).sum())
            .collect()
    }
}

pub const DEFAULT_EXACT_CAP: usize = 64;

/// Exact optimal transport under uniform marginals.
///
/// Solved as an integral min-cost flow: every row supplies `cols` units,
/// every column absorbs `rows` units, so the optimum is integral and the
/// plan is the flow divided by `rows * cols`. Successive shortest paths with
/// Dijkstra on reduced costs.
pub fn solve_exact(cost: &CostMatrix, cap: usize) -> Result<TransportPlan> {
    let (n, m) = (cost.rows, cost.cols);
    if n.max(m) > cap {
        return Err(Error::ExactSolverCap { size: n.max(m), cap });
    }
    if n == 0 || m == 0 {
        return Err(Error::Contract("empty cost matrix".into()));
    }
    let supply = m as i64;
    let demand = n as i64;
    let mut flow = vec![0i64; n * m];
    let mut out = vec![0i64; n];
    let mut inn = vec![0i64; m];
    // nodes: 0 = source, 1..=n rows, n+1..=n+m cols, n+m+1 = sink
    let v = n + m + 2;
    let (src, sink) = (0, n + m + 1);
    let mut pot = vec![0.0f64; v];
    for j in 0..m {
        pot[1 + n + j] = (0..n).map(|i| cost.at(i, j)).fold(f64::INFINITY, f64::min);
    }
    pot[sink] = pot[1 + n..1 + n + m].iter().copied().fold(f64::INFINITY, f64::min);

    let mut remaining = supply * n as i64;
    while remaining > 0 {
        // dense Dijkstra over the residual graph
        let mut dist = vec![f64::INFINITY; v];
        let mut prev = vec![usize::MAX; v];
        let mut done = vec![false; v];
        dist[src] = 0.0;
        loop {
            let mut u = usize::MAX;
            for k in 0..v {
                if !done[k] && dist[k].is_finite() && (u == usize::MAX || dist[k] < dist[u]) {
                    u = k;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            let relax = |w: usize, c: f64, dist: &mut Vec<f64>, prev: &mut Vec<usize>| {
                let nd = dist[u] + (c + pot[u] - pot[w]).max(0.0);
                if nd < dist[w] {
                    dist[w] = nd;
                    prev[w] = u;
                }
            };
            if u == src {
                for i in 0..n {
                    if out[i] < supply {
                        relax(1 + i, 0.0, &mut dist, &mut prev);
                    }
                }
            } else if u <= n {
                let i = u - 1;
                for j in 0..m {
                    relax(1 + n + j, cost.at(i, j), &mut dist, &mut prev);
                }
                if out[i] > 0 {
                    relax(src, 0.0, &mut dist, &mut prev);
                }
            } else if u < sink {
                let j = u - 1 - n;
                for i in 0..n {
                    if flow[i * m + j] > 0 {
                        relax(1 + i, -cost.at(i, j), &mut dist, &mut prev);
                    }
                }
                if inn[j] < demand {
                    relax(sink, 0.0, &mut dist, &mut prev);
                }
            } else {
                for j in 0..m {
                    if inn[j] > 0 {
                        relax(1 + n + j, 0.0, &mut dist, &mut prev);
                    }
                }
            }
        }
        if !dist[sink].is_finite() {
            return Err(Error::Contract("transport problem infeasible".into()));
        }
        let reach = dist.iter().copied().filter(|d| d.is_finite()).fold(0.0, f64::max);
        for k in 0..v {
            pot[k] += if dist[k].is_finite() { dist[k] } else { reach };
        }
        // bottleneck along the path
        let mut path = Vec::new();
        let mut w = sink;
        while w != src {
            path.push((prev[w], w));
            w = prev[w];
        }
        let mut push = remaining;
        for &(u, w) in &path {
            let capacity = if u == src {
                supply - out[w - 1]
            } else if w == sink {
                demand - inn[u - 1 - n]
            } else if u <= n && w > n {
                i64::MAX
            } else if u > n && w <= n && w != src {
                flow[(w - 1) * m + (u - 1 - n)]
            } else if w == src {
                out[u - 1]
            } else {
                inn[w - 1 - n]
            };
            push = push.min(capacity);
        }
        for &(u, w) in &path {
            if u == src {
                out[w - 1] += push;
            } else if w == sink {
                inn[u - 1 - n] += push;
            } else if u <= n && w > n && w != sink {
                flow[(u - 1) * m + (w - 1 - n)] += push;
            } else if u > n && w <= n && w != src {
                flow[(w - 1) * m + (u - 1 - n)] -= push;
            } else if w == src {
                out[u - 1] -= push;
            } else {
                inn[w - 1 - n] -= push;
            }
        }
        remaining = supply * n as i64 - out.iter().sum::<i64>();
    }
    let total = (n * m) as f64;
    let plan: Vec<f64> = flow.iter().map(|&f| f as f64 / total).collect();
    let total_cost = plan.iter().zip(&cost.data).map(|(p, c)| p * c).sum();
    Ok(TransportPlan {
        rows: n,
        cols: m,
        plan,
        total_cost,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornResult {
    pub transport: TransportPlan,
    /// L1 violation of the row marginals after the final column update.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

const ANNEAL_STEPS: usize = 50;
const ANNEAL_FACTOR: f64 = 0.7;

fn sinkhorn_sweep(cost: &CostMatrix, la: &[f64], lb: &[f64], reg: f64, f: &mut Vec<f64>, g: &mut Vec<f64>) {
    let (n, m) = (cost.rows, cost.cols);
    *f = par::map_range(n, |i| {
        reg * la[i] - reg * log_sum_exp((0..m).map(|j| (g[j] - cost.at(i, j)) / reg))
    });
    *g = par::map_range(m, |j| {
        reg * lb[j] - reg * log_sum_exp((0..n).map(|i| (f[i] - cost.at(i, j)) / reg))
    });
}

/// Entropic optimal transport in the log domain.
pub fn solve_sinkhorn(
    cost: &CostMatrix,
    a: &[f64],
    b: &[f64],
    reg: f64,
    max_iter: usize,
    tol: f64,
) -> Result<SinkhornResult> {
    let (n, m) = (cost.rows, cost.cols);
    if !(reg > 0.0) {
        return Err(Error::Config(format!("sinkhorn regularisation must be positive, got {reg}")));
    }
    if a.len() != n || b.len() != m {
        return Err(Error::Dimension("marginal lengths do not match the cost matrix".into()));
    }
    let la: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let lb: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    let mut f = vec![0.0f64; n];
    let mut g = vec![0.0f64; m];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    // anneal the regulariser down from the cost scale; the potentials carry
    // over, so the target problem starts from a good guess
    let scale = cost.data.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    let mut r = scale.max(reg);
    while r > reg && iterations < max_iter {
        for _ in 0..ANNEAL_STEPS.min(max_iter - iterations) {
            iterations += 1;
            sinkhorn_sweep(cost, &la, &lb, r, &mut f, &mut g);
        }
        r = (r * ANNEAL_FACTOR).max(reg);
    }
    while iterations < max_iter {
        iterations += 1;
        sinkhorn_sweep(cost, &la, &lb, reg, &mut f, &mut g);
        residual = (0..n)
            .map(|i| {
                let row: f64 = (0..m).map(|j| ((f[i] + g[j] - cost.at(i, j)) / reg).exp()).sum();
                (row - a[i]).abs()
            })
            .sum();
        if residual <= tol {
            break;
        }
    }
    let converged = residual <= tol;
    if !converged {
        log::warn!("sinkhorn did not converge in {max_iter} iterations (residual {residual:.3e})");
    }
    let plan: Vec<f64> = (0..n * m)
        .map(|k| ((f[k / m] + g[k % m] - cost.data[k]) / reg).exp())
        .collect();
    let total_cost = plan.iter().zip(&cost.data).map(|(p, c)| p * c).sum();
    Ok(SinkhornResult {
        transport: TransportPlan {
            rows: n,
            cols: m,
            plan,
            total_cost,
        },
        residual,
        iterations,
        converged,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Exact,
    #[default]
    Sinkhorn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OtddConfig {
    pub solver: Solver,
    pub sinkhorn_reg: f64,
    pub sinkhorn_max_iter: usize,
    pub sinkhorn_tol: f64,
    /// Covariance regulariser, relative to the mean feature variance of the
    /// two sets (absolute when that variance is zero).
    pub cov_regularizer: f64,
    pub eps: f64,
    /// Samples per feature set.
    pub subsample: usize,
    pub exact_cap: usize,
}

impl Default for OtddConfig {
    fn default() -> Self {
        OtddConfig {
            solver: Solver::Sinkhorn,
            sinkhorn_reg: 0.1,
            sinkhorn_max_iter: 10_000,
            sinkhorn_tol: 1e-6,
            cov_regularizer: 1e-6,
            eps: 1e-9,
            subsample: 500,
            exact_cap: DEFAULT_EXACT_CAP,
        }
    }
}

impl OtddConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sinkhorn_reg", self.sinkhorn_reg),
            ("sinkhorn_tol", self.sinkhorn_tol),
            ("cov_regularizer", self.cov_regularizer),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("otdd.{name} must be positive, got {v}")));
            }
        }
        if !(self.eps >= 0.0) {
            return Err(Error::Config("otdd.eps must be non-negative".into()));
        }
        if self.subsample == 0 || self.sinkhorn_max_iter == 0 {
            return Err(Error::Config("otdd.subsample and sinkhorn_max_iter must be positive".into()));
        }
        Ok(())
    }

    pub fn exact() -> Self {
        OtddConfig {
            solver: Solver::Exact,
            ..Default::default()
        }
    }
}

/// Dataset distance between two labeled feature sets.
pub fn otdd(a: &LabeledFeatureSet, b: &LabeledFeatureSet, cfg: &OtddConfig) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("otdd of an empty feature set".into()));
    }
    if a.dim != b.dim {
        return Err(Error::Dimension(format!(
            "feature dimensions differ: {} vs {}",
            a.dim, b.dim
        )));
    }
    // the regulariser follows the pooled feature scale so that scaling every
    // feature by s scales the distance by exactly s
    let var = (a.mean_feature_variance() + b.mean_feature_variance()) / 2.0;
    let lambda = if var > 0.0 {
        cfg.cov_regularizer * var
    } else {
        cfg.cov_regularizer
    };
    let ma = class_moments(a, lambda)?;
    let mb = class_moments(b, lambda)?;
    let cost = pairwise_cost(a, b, &ma, &mb)?;
    let total = match cfg.solver {
        Solver::Exact => solve_exact(&cost, cfg.exact_cap)?.total_cost,
        Solver::Sinkhorn => {
            let ua = vec![1.0 / a.len() as f64; a.len()];
            let ub = vec![1.0 / b.len() as f64; b.len()];
            solve_sinkhorn(&cost, &ua, &ub, cfg.sinkhorn_reg, cfg.sinkhorn_max_iter, cfg.sinkhorn_tol)?
                .transport
                .total_cost
        }
    };
    Ok(total.max(0.0).sqrt())
}

/// One row of a block importance report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEntry {
    pub block_id: usize,
    #[serde(rename = "BI")]
    pub bi: f64,
    pub numerator: f64,
    pub denominator: f64,
    pub n_src: usize,
    pub n_tgt: usize,
    pub seeds: Vec<u64>,
    /// Denominator at or below `eps`.
    pub degenerate: bool,
}

/// `otdd(src, tgt) / (otdd(src, src') + eps)` with both distances kept.
pub fn importance(
    src: &LabeledFeatureSet,
    src_prime: &LabeledFeatureSet,
    tgt: &LabeledFeatureSet,
    cfg: &OtddConfig,
) -> Result<ImportanceEntry> {
    let numerator = otdd(src, tgt, cfg)?;
    let denominator = otdd(src, src_prime, cfg)?;
    let degenerate = denominator <= cfg.eps;
    if degenerate {
        log::warn!(
            "block {}: source self-distance {denominator:.3e} is degenerate",
            src.block_id
        );
    }
    Ok(ImportanceEntry {
        block_id: src.block_id,
        bi: numerator / (denominator + cfg.eps),
        numerator,
        denominator,
        n_src: src.len(),
        n_tgt: tgt.len(),
        seeds: vec![src.seed, src_prime.seed, tgt.seed],
        degenerate,
    })
}

/// Importance of a block from activations taken at its output.
pub fn block_importance(
    src: &LabeledFeatureSet,
    src_prime: &LabeledFeatureSet,
    tgt: &LabeledFeatureSet,
    cfg: &OtddConfig,
) -> Result<f64> {
    Ok(importance(src, src_prime, tgt, cfg)?.bi)
}

/// Importance of a single layer; the same ratio over per-layer activations.
pub fn layer_importance(
    src: &LabeledFeatureSet,
    src_prime: &LabeledFeatureSet,
    tgt: &LabeledFeatureSet,
    cfg: &OtddConfig,
) -> Result<f64> {
    Ok(importance(src, src_prime, tgt, cfg)?.bi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockImportanceReport {
    pub source: String,
    pub target: String,
    pub config_hash: String,
    pub seed: u64,
    pub blocks: Vec<ImportanceEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fs(points: &[[f64; 2]], labels: &[usize]) -> LabeledFeatureSet {
        LabeledFeatureSet::new(points.iter().flatten().copied().collect(), 2, labels.to_vec()).unwrap()
    }

    #[test]
    fn moments_hand_computed() {
        let m = class_moments(&fs(&[[0.0, 0.0], [2.0, 0.0]], &[0, 0]), 1e-6).unwrap();
        let g = &m.classes[&0];
        assert_eq!(g.mean.as_slice(), &[1.0, 0.0]);
        assert_eq!(g.cov, DMatrix::from_row_slice(2, 2, &[2.0 + 1e-6, 0.0, 0.0, 1e-6]));

        let m = class_moments(&fs(&[[3.0, 1.0], [3.0, 1.0]], &[5, 5]), 0.25).unwrap();
        assert_eq!(m.classes[&5].cov, DMatrix::identity(2, 2) * 0.25);
    }

    #[test]
    fn moments_need_two_samples() {
        let err = class_moments(&fs(&[[0.0, 0.0], [1.0, 0.0], [2.0, 2.0]], &[0, 0, 7]), 1e-6).unwrap_err();
        assert!(matches!(err, Error::Moments { class: 7, count: 1 }));
    }

    #[test]
    fn moments_permutation_invariant() {
        let a = fs(&[[0.1, 0.7], [2.3, -1.0], [0.4, 0.4], [5.0, 1.0]], &[0, 1, 0, 1]);
        let b = fs(&[[5.0, 1.0], [0.4, 0.4], [2.3, -1.0], [0.1, 0.7]], &[1, 0, 1, 0]);
        assert_eq!(class_moments(&a, 1e-6).unwrap(), class_moments(&b, 1e-6).unwrap());
    }

    #[test]
    fn w2_closed_forms() {
        let v = |x: &[f64]| DVector::from_column_slice(x);
        let s = |x: f64| DMatrix::from_element(1, 1, x);
        assert_eq!(gaussian_w2(&v(&[0.0]), &s(1.0), &v(&[0.0]), &s(1.0)).unwrap(), 0.0);
        assert!((gaussian_w2(&v(&[0.0]), &s(1.0), &v(&[3.0]), &s(1.0)).unwrap() - 3.0).abs() < 1e-12);
        let d1 = DMatrix::from_diagonal(&v(&[1.0, 4.0]));
        let d2 = DMatrix::from_diagonal(&v(&[4.0, 1.0]));
        let w = gaussian_w2(&v(&[0.0, 0.0]), &d1, &v(&[0.0, 0.0]), &d2).unwrap();
        assert!((w - 2f64.sqrt()).abs() < 1e-12);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            gaussian_w2(&v(&[0.0, 0.0]), &bad, &v(&[0.0, 0.0]), &d1),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn cost_entries() {
        let a = fs(&[[0.0, 0.0], [1.0, 1.0], [0.0, 2.0], [5.0, 5.0]], &[0, 0, 0, 1]);
        let a = LabeledFeatureSet {
            labels: vec![0, 0, 1, 1],
            ..a
        };
        let m = class_moments(&a, 1e-6).unwrap();
        let c = pairwise_cost(&a, &a, &m, &m).unwrap();
        for i in 0..4 {
            assert_eq!(c.at(i, i), 0.0);
        }
        // same label, distance sqrt(2) apart
        assert!((c.at(0, 1) - 2.0).abs() < 1e-12);
        let b = LabeledFeatureSet::new(vec![0.0; 3], 3, vec![0]).unwrap();
        assert!(matches!(pairwise_cost(&a, &b, &m, &m), Err(Error::Dimension(_))));
    }

    #[test]
    fn exact_small_cases() {
        let z = solve_exact(&CostMatrix::new(3, 3, vec![0.0; 9]), 64).unwrap();
        assert_eq!(z.total_cost, 0.0);
        let t = solve_exact(&CostMatrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]), 64).unwrap();
        assert_eq!(t.plan, vec![0.5, 0.0, 0.0, 0.5]);
        assert_eq!(t.total_cost, 0.0);
        assert!(matches!(
            solve_exact(&CostMatrix::new(65, 65, vec![0.0; 65 * 65]), 64),
            Err(Error::ExactSolverCap { size: 65, cap: 64 })
        ));
    }

    #[test]
    fn exact_rectangular_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = CostMatrix::new(3, 5, (0..15).map(|_| rng.random::<f64>()).collect());
        let p = solve_exact(&c, 64).unwrap();
        for r in p.row_sums() {
            assert!((r - 1.0 / 3.0).abs() < 1e-12);
        }
        for s in p.col_sums() {
            assert!((s - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn sinkhorn_zero_cost() {
        let u = vec![0.25; 4];
        let r = solve_sinkhorn(&CostMatrix::new(4, 4, vec![0.0; 16]), &u, &u, 0.1, 100, 1e-9).unwrap();
        assert_eq!(r.transport.total_cost, 0.0);
        assert!(r.converged);
    }

    #[test]
    fn dump_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let a = fs(&[[0.5, -1.25], [2.0, 3.0]], &[1, 4]).with_provenance(3, "toy-source", 42);
        let p = dir.path().join("a.bin");
        a.write_dump(&p).unwrap();
        assert_eq!(LabeledFeatureSet::read_dump(&p).unwrap(), a);
        fs::write(&p, b"garbage").unwrap();
        assert!(matches!(LabeledFeatureSet::read_dump(&p), Err(Error::Format(_))));
    }

    #[test]
    fn eps_zero_is_negligible() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut make = || {
            let pts: Vec<f64> = (0..24).map(|_| rng.random::<f64>()).collect();
            LabeledFeatureSet::new(pts, 2, (0..12).map(|i| i % 2).collect()).unwrap()
        };
        let (s, sp, t) = (make(), make(), make());
        let cfg = OtddConfig::exact();
        let with = block_importance(&s, &sp, &t, &cfg).unwrap();
        let without = block_importance(&s, &sp, &t, &OtddConfig { eps: 0.0, ..cfg.clone() }).unwrap();
        assert!((with - without).abs() <= 1e-6 * with);
        assert_eq!(layer_importance(&s, &sp, &t, &cfg).unwrap(), with);
    }
}
