//! Optimal transport between embedded trajectories and the deviation index.
//!
//! Both marginals are uniform (`1/L_e` per expert frame, `1/L_b` per rollout
//! frame). Small instances are solved exactly as a transportation LP; longer
//! trajectories use log-stabilised Sinkhorn iterations whose plan is rounded
//! back onto the transport polytope, so its cost always upper-bounds the exact
//! optimum.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::Embedding;

#[derive(Debug, Error, PartialEq)]
pub enum OtError {
    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("empty trajectory")]
    EmptyTrajectory,

    #[error("instance {rows}x{cols} exceeds exact solver cap {cap}; use ot_sinkhorn")]
    TooLargeForExact { rows: usize, cols: usize, cap: usize },

    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),

    #[error("expert set is empty")]
    NoExperts,

    #[error("rollout prefix has length {len}, minimum is {min}")]
    PrefixTooShort { len: usize, min: usize },

    #[error("cannot calibrate a threshold from an empty list")]
    EmptyCalibration,

    #[error("percentile must be in (0, 100], got {0}")]
    InvalidPercentile(f64),
}

pub type OtResult<T> = std::result::Result<T, OtError>;

/// Ordered frame embeddings of one demo or rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedTrajectory {
    pub embeddings: Vec<Embedding>,
    pub label: String,
}

impl EmbeddedTrajectory {
    pub fn new(label: impl Into<String>, embeddings: Vec<Embedding>) -> OtResult<Self> {
        if embeddings.is_empty() {
            return Err(OtError::EmptyTrajectory);
        }
        let d = embeddings[0].dim();
        if let Some(bad) = embeddings.iter().find(|e| e.dim() != d) {
            return Err(OtError::DimensionMismatch(d, bad.dim()));
        }
        Ok(EmbeddedTrajectory { embeddings, label: label.into() })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.first().map_or(0, Embedding::dim)
    }

    /// Trajectory made of the first `len` frames.
    pub fn prefix(&self, len: usize) -> EmbeddedTrajectory {
        EmbeddedTrajectory {
            embeddings: self.embeddings[..len.min(self.len())].to_vec(),
            label: self.label.clone(),
        }
    }
}

/// `C_ij = 1 - <a_i, b_j>`, entries in `[0, 2]` for unit embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(pub Array2<f64>);

impl CostMatrix {
    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn transpose(&self) -> CostMatrix {
        CostMatrix(self.0.t().to_owned())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub coupling: Array2<f64>,
    pub total_cost: f64,
    /// Always `true` for the exact solver.
    pub converged: bool,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        self.coupling.rows().into_iter().map(|r| r.sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        self.coupling.columns().into_iter().map(|c| c.sum()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloatIndex {
    pub value: f64,
    /// Position of the closest expert in the expert list.
    pub argmin_demo: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Entropic regularisation for Sinkhorn.
    pub epsilon: f64,
    pub max_iters: usize,
    /// L1 marginal violation at which Sinkhorn stops.
    pub convergence_tol: f64,
    /// Control steps between deviation evaluations.
    pub eval_stride: usize,
    pub min_prefix: usize,
    pub percentile: f64,
    /// Largest side handled by the exact solver.
    pub exact_size_cap: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            epsilon: 1e-2,
            max_iters: 2000,
            convergence_tol: 1e-6,
            eval_stride: 10,
            min_prefix: 5,
            percentile: 95.0,
            exact_size_cap: 16,
        }
    }
}

pub fn cosine_cost(a: &EmbeddedTrajectory, b: &EmbeddedTrajectory) -> OtResult<CostMatrix> {
    if a.is_empty() || b.is_empty() {
        return Err(OtError::EmptyTrajectory);
    }
    if a.dim() != b.dim() {
        return Err(OtError::DimensionMismatch(a.dim(), b.dim()));
    }
    let cost = Array2::from_shape_fn((a.len(), b.len()), |(i, j)| {
        (1.0 - a.embeddings[i].dot(&b.embeddings[j])).clamp(0.0, 2.0)
    });
    Ok(CostMatrix(cost))
}

fn plan_cost(cost: &Array2<f64>, coupling: &Array2<f64>) -> f64 {
    cost.iter().zip(coupling.iter()).map(|(c, m)| c * m).sum()
}

/// Exact uniform-marginal OT.
///
/// Marginals are scaled to integers (each row supplies `L_b` units, each
/// column demands `L_e` units) and the transportation LP is solved by
/// successive shortest augmenting paths with Johnson potentials. Flows stay
/// integral, so the marginals of the returned plan are exact.
pub fn ot_exact(cost: &CostMatrix) -> OtResult<TransportPlan> {
    ot_exact_capped(cost, DetectorConfig::default().exact_size_cap)
}

pub fn ot_exact_capped(cost: &CostMatrix, cap: usize) -> OtResult<TransportPlan> {
    let (m, n) = cost.0.dim();
    if m == 0 || n == 0 {
        return Err(OtError::EmptyTrajectory);
    }
    if m > cap || n > cap {
        return Err(OtError::TooLargeForExact { rows: m, cols: n, cap });
    }
    let flow = min_cost_transport(&cost.0);
    let total = (m * n) as f64;
    let coupling = flow.mapv(|f| f as f64 / total);
    let total_cost = plan_cost(&cost.0, &coupling);
    Ok(TransportPlan { coupling, total_cost, converged: true })
}

/// Integer transportation problem: rows supply `n`, columns demand `m`.
fn min_cost_transport(c: &Array2<f64>) -> Array2<i64> {
    let (m, n) = c.dim();
    let mut supply = vec![n as i64; m];
    let mut demand = vec![m as i64; n];
    let mut flow = Array2::<i64>::zeros((m, n));

    // Node ids: rows 0..m, columns m..m+n. Reduced cost of a forward arc
    // i -> j is c_ij + pot[i] - pot[m+j] and stays >= 0 (up to rounding).
    let mut pot = vec![0.0; m + n];
    for j in 0..n {
        pot[m + j] = (0..m).map(|i| c[[i, j]]).fold(f64::INFINITY, f64::min);
    }

    let v = m + n;
    let mut dist = vec![f64::INFINITY; v];
    let mut prev = vec![usize::MAX; v];
    let mut done = vec![false; v];

    while supply.iter().any(|&s| s > 0) {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        prev.iter_mut().for_each(|p| *p = usize::MAX);
        done.iter_mut().for_each(|d| *d = false);
        for i in 0..m {
            if supply[i] > 0 {
                dist[i] = 0.0;
            }
        }
        // Dense Dijkstra; the graph is tiny.
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for k in 0..v {
                if !done[k] && dist[k] < best {
                    best = dist[k];
                    u = k;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u < m {
                for j in 0..n {
                    let w = m + j;
                    let rc = (c[[u, j]] + pot[u] - pot[w]).max(0.0);
                    if dist[u] + rc < dist[w] {
                        dist[w] = dist[u] + rc;
                        prev[w] = u;
                    }
                }
            } else {
                let j = u - m;
                for i in 0..m {
                    if flow[[i, j]] > 0 {
                        let rc = (-c[[i, j]] + pot[u] - pot[i]).max(0.0);
                        if dist[u] + rc < dist[i] {
                            dist[i] = dist[u] + rc;
                            prev[i] = u;
                        }
                    }
                }
            }
        }

        // Cheapest column that still has demand.
        let sink = (0..n)
            .filter(|&j| demand[j] > 0 && dist[m + j].is_finite())
            .min_by(|&a, &b| dist[m + a].total_cmp(&dist[m + b]))
            .map(|j| m + j)
            .expect("transport problem is always feasible");

        let max_d = dist[sink];
        for k in 0..v {
            pot[k] += dist[k].min(max_d);
        }

        // Bottleneck along the path.
        let mut amount = demand[sink - m];
        let mut w = sink;
        while prev[w] != usize::MAX {
            let u = prev[w];
            if u >= m {
                // backward arc column u -> row w
                amount = amount.min(flow[[w, u - m]]);
            }
            w = u;
        }
        amount = amount.min(supply[w]);
        debug_assert!(amount > 0);

        let source = w;
        let mut w = sink;
        while prev[w] != usize::MAX {
            let u = prev[w];
            if u < m {
                flow[[u, w - m]] += amount;
            } else {
                flow[[w, u - m]] -= amount;
            }
            w = u;
        }
        supply[source] -= amount;
        demand[sink - m] -= amount;
    }
    flow
}

/// Entropic OT with log-stabilised scalings followed by rounding onto the
/// uniform-marginal transport polytope.
///
/// Non-convergence within `max_iters` is not an error: the rounded best plan
/// is returned with `converged = false`.
pub fn ot_sinkhorn(cost: &CostMatrix, cfg: &DetectorConfig) -> OtResult<TransportPlan> {
    let eps = cfg.epsilon;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(OtError::InvalidEpsilon(eps));
    }
    let c = &cost.0;
    let (m, n) = c.dim();
    if m == 0 || n == 0 {
        return Err(OtError::EmptyTrajectory);
    }
    let a = 1.0 / m as f64;
    let b = 1.0 / n as f64;

    // Dual potentials absorbed into the kernel; u, v are the residual scalings.
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    // Start from the c-transform so the kernel has at least one O(1) entry per row.
    for i in 0..m {
        f[i] = -c.row(i).iter().fold(f64::INFINITY, |acc, &x| acc.min(x));
    }
    let mut kernel = Array2::<f64>::zeros((m, n));
    let rebuild = |kernel: &mut Array2<f64>, f: &[f64], g: &[f64]| {
        for i in 0..m {
            for j in 0..n {
                kernel[[i, j]] = ((f[i] + g[j] - c[[i, j]]) / eps).exp();
            }
        }
    };
    rebuild(&mut kernel, &f, &g);
    let mut u = vec![1.0; m];
    let mut v = vec![1.0; n];
    let mut kv = vec![0.0; m];
    let mut ktu = vec![0.0; n];
    const ABSORB: f64 = 1e50;

    let mut converged = false;
    for iter in 0..cfg.max_iters {
        // u = a / (K v)
        for i in 0..m {
            let row = kernel.row(i);
            let s: f64 = row.iter().zip(&v).map(|(k, vj)| k * vj).sum();
            kv[i] = s;
        }
        for i in 0..m {
            u[i] = if kv[i] > 0.0 { a / kv[i] } else { ABSORB };
        }
        // v = b / (K^T u)
        ktu.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..m {
            let ui = u[i];
            for (j, k) in kernel.row(i).iter().enumerate() {
                ktu[j] += k * ui;
            }
        }
        for j in 0..n {
            v[j] = if ktu[j] > 0.0 { b / ktu[j] } else { ABSORB };
        }

        let big = u.iter().chain(v.iter()).any(|&x| !(x < ABSORB && x > 1.0 / ABSORB));
        if big {
            for i in 0..m {
                f[i] += eps * u[i].ln();
                u[i] = 1.0;
            }
            for j in 0..n {
                g[j] += eps * v[j].ln();
                v[j] = 1.0;
            }
            rebuild(&mut kernel, &f, &g);
            continue;
        }

        if iter % 5 == 4 {
            // Column marginals are exact after the v update; check rows.
            let mut err = 0.0;
            for i in 0..m {
                let s: f64 = kernel.row(i).iter().zip(&v).map(|(k, vj)| k * vj).sum();
                err += (u[i] * s - a).abs();
            }
            if err < cfg.convergence_tol {
                converged = true;
                break;
            }
        }
    }

    let mut p = Array2::from_shape_fn((m, n), |(i, j)| u[i] * kernel[[i, j]] * v[j]);
    round_to_polytope(&mut p, a, b);
    let total_cost = plan_cost(c, &p);
    Ok(TransportPlan { coupling: p, total_cost, converged })
}

/// Projects a positive matrix onto the transport polytope with uniform
/// marginals `a` (rows) and `b` (columns): scale down overfull rows, then
/// overfull columns, then redistribute the residual mass as a rank-one term.
fn round_to_polytope(p: &mut Array2<f64>, a: f64, b: f64) {
    let (m, n) = p.dim();
    for i in 0..m {
        let r: f64 = p.row(i).sum();
        if r > a {
            let s = a / r;
            p.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
    }
    for j in 0..n {
        let col: f64 = p.column(j).sum();
        if col > b {
            let s = b / col;
            p.column_mut(j).iter_mut().for_each(|x| *x *= s);
        }
    }
    let err_r: Vec<f64> = (0..m).map(|i| (a - p.row(i).sum()).max(0.0)).collect();
    let err_c: Vec<f64> = (0..n).map(|j| (b - p.column(j).sum()).max(0.0)).collect();
    let mass: f64 = err_r.iter().sum();
    if mass > 0.0 {
        for i in 0..m {
            for j in 0..n {
                p[[i, j]] += err_r[i] * err_c[j] / mass;
            }
        }
    }
}

/// Exact when both sides fit under the cap, Sinkhorn otherwise.
pub fn ot_distance(cost: &CostMatrix, cfg: &DetectorConfig) -> OtResult<TransportPlan> {
    if cost.rows() <= cfg.exact_size_cap && cost.cols() <= cfg.exact_size_cap {
        ot_exact_capped(cost, cfg.exact_size_cap)
    } else {
        ot_sinkhorn(cost, cfg)
    }
}

/// Cheap lower bound on uniform-marginal OT: every row ships `1/L_e` mass at
/// no less than its row minimum, and symmetrically for columns.
fn ot_lower_bound(cost: &CostMatrix) -> f64 {
    let c = &cost.0;
    let (m, n) = c.dim();
    let rows: f64 = c
        .rows()
        .into_iter()
        .map(|r| r.iter().fold(f64::INFINITY, |a, &x| a.min(x)))
        .sum::<f64>()
        / m as f64;
    let cols: f64 = c
        .columns()
        .into_iter()
        .map(|col| col.iter().fold(f64::INFINITY, |a, &x| a.min(x)))
        .sum::<f64>()
        / n as f64;
    rows.max(cols)
}

/// Deviation index: minimum OT distance from the rollout to any expert.
///
/// Experts whose lower bound already meets the best value so far are skipped;
/// the skip never changes the minimum or the lowest-index tie-break.
pub fn float_index(
    rollout: &EmbeddedTrajectory,
    experts: &[EmbeddedTrajectory],
    cfg: &DetectorConfig,
) -> OtResult<FloatIndex> {
    if experts.is_empty() {
        return Err(OtError::NoExperts);
    }
    if rollout.len() < cfg.min_prefix.max(1) {
        return Err(OtError::PrefixTooShort { len: rollout.len(), min: cfg.min_prefix.max(1) });
    }
    let mut best = FloatIndex { value: f64::INFINITY, argmin_demo: 0 };
    for (k, expert) in experts.iter().enumerate() {
        let cost = cosine_cost(expert, rollout)?;
        if ot_lower_bound(&cost) >= best.value {
            continue;
        }
        let plan = ot_distance(&cost, cfg)?;
        if plan.total_cost < best.value {
            best = FloatIndex { value: plan.total_cost, argmin_demo: k };
        }
    }
    Ok(best)
}

/// Nearest-rank percentile: the value at 1-based rank `ceil(p/100 * N)` of the
/// sorted list.
pub fn calibrate_threshold(successful_indices: &[f64], cfg: &DetectorConfig) -> OtResult<f64> {
    percentile_nearest_rank(successful_indices, cfg.percentile)
}

pub fn percentile_nearest_rank(values: &[f64], p: f64) -> OtResult<f64> {
    if values.is_empty() {
        return Err(OtError::EmptyCalibration);
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(OtError::InvalidPercentile(p));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // Multiply before dividing so integral ranks stay exact.
    let rank = ((p * n as f64) / 100.0 - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(n) - 1])
}

/// Strict: equality means autonomous exploration continues.
pub fn should_trigger(lambda_t: f64, threshold: f64) -> bool {
    lambda_t > threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::from_raw(v.to_vec())
    }

    fn traj(vs: &[&[f64]]) -> EmbeddedTrajectory {
        EmbeddedTrajectory::new("t", vs.iter().map(|v| emb(v)).collect()).unwrap()
    }

    #[test]
    fn cosine_cost_entries() {
        let a = traj(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = traj(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let c = cosine_cost(&a, &b).unwrap();
        assert!((c.0[[0, 0]] - 0.0).abs() < 1e-12);
        assert!((c.0[[1, 0]] - 1.0).abs() < 1e-12);
        assert!((c.0[[0, 1]] - 2.0).abs() < 1e-12);
        assert_eq!(cosine_cost(&b, &a).unwrap(), c.transpose());
    }

    #[test]
    fn cosine_cost_dim_mismatch() {
        let a = traj(&[&[1.0, 0.0]]);
        let b = traj(&[&[1.0, 0.0, 0.0]]);
        assert_eq!(cosine_cost(&a, &b), Err(OtError::DimensionMismatch(2, 3)));
    }

    #[test]
    fn exact_one_by_one() {
        let p = ot_exact(&CostMatrix(array![[0.7]])).unwrap();
        assert_eq!(p.coupling, array![[1.0]]);
        assert!((p.total_cost - 0.7).abs() < 1e-15);
    }

    #[test]
    fn exact_zero_diagonal() {
        let n = 5;
        let c = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { 0.3 + (i + j) as f64 * 0.1 });
        let p = ot_exact(&CostMatrix(c)).unwrap();
        assert!(p.total_cost.abs() < 1e-15);
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j { 1.0 / n as f64 } else { 0.0 };
                assert!((p.coupling[[i, j]] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn exact_rejects_large() {
        let c = CostMatrix(Array2::zeros((17, 3)));
        assert!(matches!(ot_exact(&c), Err(OtError::TooLargeForExact { .. })));
    }

    #[test]
    fn exact_rectangular_marginals() {
        let c = CostMatrix(Array2::from_shape_fn((3, 7), |(i, j)| ((i * 7 + j) as f64 * 0.37).sin().abs()));
        let p = ot_exact(&c).unwrap();
        for r in p.row_sums() {
            assert!((r - 1.0 / 3.0).abs() < 1e-12);
        }
        for s in p.col_sums() {
            assert!((s - 1.0 / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sinkhorn_zero_cost() {
        let c = CostMatrix(Array2::zeros((4, 6)));
        for eps in [1.0, 1e-2, 1e-3] {
            let cfg = DetectorConfig { epsilon: eps, ..Default::default() };
            let p = ot_sinkhorn(&c, &cfg).unwrap();
            assert!(p.total_cost.abs() < 1e-9);
        }
    }

    #[test]
    fn sinkhorn_rejects_bad_epsilon() {
        let c = CostMatrix(Array2::zeros((2, 2)));
        let cfg = DetectorConfig { epsilon: 0.0, ..Default::default() };
        assert_eq!(ot_sinkhorn(&c, &cfg), Err(OtError::InvalidEpsilon(0.0)));
    }

    #[test]
    fn sinkhorn_reports_nonconvergence() {
        let c = CostMatrix(Array2::from_shape_fn((6, 6), |(i, j)| ((i * 3 + j * 5) % 7) as f64 / 3.5));
        let cfg = DetectorConfig { epsilon: 1e-3, max_iters: 1, ..Default::default() };
        let p = ot_sinkhorn(&c, &cfg).unwrap();
        assert!(!p.converged);
        for r in p.row_sums() {
            assert!((r - 1.0 / 6.0).abs() < 1e-9);
        }
    }

    #[test]
    fn float_index_self_and_antipodal() {
        let e1 = traj(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        let e2 = traj(&[&[0.0, 0.0, 1.0]]);
        let cfg = DetectorConfig { min_prefix: 1, ..Default::default() };
        let fi = float_index(&e1, &[e2.clone(), e1.clone()], &cfg).unwrap();
        assert!(fi.value.abs() < 1e-6);
        assert_eq!(fi.argmin_demo, 1);

        let anti = traj(&[&[0.0, 0.0, -1.0], &[0.0, 0.0, -1.0]]);
        let fi = float_index(&anti, &[e2], &cfg).unwrap();
        assert!((fi.value - 2.0).abs() < 1e-6);
    }

    #[test]
    fn float_index_errors() {
        let e = traj(&[&[1.0, 0.0]]);
        let cfg = DetectorConfig { min_prefix: 1, ..Default::default() };
        assert_eq!(float_index(&e, &[], &cfg), Err(OtError::NoExperts));
        let cfg = DetectorConfig { min_prefix: 3, ..Default::default() };
        assert!(matches!(float_index(&e, &[e.clone()], &cfg), Err(OtError::PrefixTooShort { .. })));
    }

    #[test]
    fn float_index_tie_goes_to_lowest_id() {
        let e = traj(&[&[1.0, 0.0]]);
        let cfg = DetectorConfig { min_prefix: 1, ..Default::default() };
        let fi = float_index(&e, &[e.clone(), e.clone(), e.clone()], &cfg).unwrap();
        assert_eq!(fi.argmin_demo, 0);
    }

    #[test]
    fn threshold_nearest_rank() {
        let cfg = DetectorConfig::default();
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(calibrate_threshold(&v, &cfg).unwrap(), 95.0);
        assert_eq!(calibrate_threshold(&[0.3, 0.1, 0.2], &cfg).unwrap(), 0.3);
        for p in [1.0, 50.0, 100.0] {
            let c = DetectorConfig { percentile: p, ..Default::default() };
            assert_eq!(calibrate_threshold(&[4.2], &c).unwrap(), 4.2);
        }
        assert_eq!(calibrate_threshold(&[], &cfg), Err(OtError::EmptyCalibration));
        let bad = DetectorConfig { percentile: 0.0, ..Default::default() };
        assert!(calibrate_threshold(&[1.0], &bad).is_err());
    }

    #[test]
    fn trigger_is_strict() {
        assert!(!should_trigger(0.5, 0.5));
        assert!(should_trigger(0.5 + 1e-12, 0.5));
        assert!(!should_trigger(0.0, 0.0));
    }
}
