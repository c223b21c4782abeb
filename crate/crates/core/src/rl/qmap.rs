use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::sac::Sac;
use super::RlError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub name: String,
    /// Observation component varied along this axis.
    pub index: usize,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl GridAxis {
    pub fn values(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / (self.n - 1) as f64)
            .collect()
    }
}

/// Raw observation with two components swept over a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSpec {
    pub base_obs: Vec<f64>,
    pub a: GridAxis,
    pub b: GridAxis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QGrid {
    pub a_name: String,
    pub b_name: String,
    pub a_values: Vec<f64>,
    pub b_values: Vec<f64>,
    /// `values[i][j]` at `(a_values[i], b_values[j])`.
    pub values: Vec<Vec<f64>>,
}

impl QGrid {
    /// `(a, b, q)` of the highest cell; first one on ties.
    pub fn argmax(&self) -> (f64, f64, f64) {
        let mut best = (self.a_values[0], self.b_values[0], f64::NEG_INFINITY);
        for (i, row) in self.values.iter().enumerate() {
            for (j, &q) in row.iter().enumerate() {
                if q > best.2 {
                    best = (self.a_values[i], self.b_values[j], q);
                }
            }
        }
        best
    }

    /// Long-format CSV: `a,b,q` with a header naming the axes.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{},q\n", self.a_name, self.b_name);
        for (i, row) in self.values.iter().enumerate() {
            for (j, q) in row.iter().enumerate() {
                s.push_str(&format!("{},{},{}\n", self.a_values[i], self.b_values[j], q));
            }
        }
        s
    }
}

/// `min(Q1, Q2)(s, tanh(mu(s)))` over the slice grid.
pub fn q_landscape(sac: &Sac, spec: &SliceSpec) -> Result<QGrid, RlError> {
    let d = sac.policy.obs_dim();
    if spec.base_obs.len() != d {
        return Err(RlError::DimensionMismatch { expected: d, got: spec.base_obs.len() });
    }
    if spec.a.n < 2 || spec.b.n < 2 {
        return Err(RlError::InvalidConfig("q grid needs at least 2x2 cells".into()));
    }
    if spec.a.index >= d || spec.b.index >= d || spec.a.index == spec.b.index {
        return Err(RlError::InvalidConfig("q grid axes must be distinct observation components".into()));
    }
    let (av, bv) = (spec.a.values(), spec.b.values());
    let mut feats = Array2::zeros((av.len() * bv.len(), d));
    for (i, &x) in av.iter().enumerate() {
        for (j, &y) in bv.iter().enumerate() {
            let mut obs = spec.base_obs.clone();
            obs[spec.a.index] = x;
            obs[spec.b.index] = y;
            let f = sac.policy.featurize(&obs);
            feats.row_mut(i * bv.len() + j).assign(&ndarray::Array1::from(f));
        }
    }
    let q = sac.q_at_policy_mean(&feats);
    let values = (0..av.len()).map(|i| (0..bv.len()).map(|j| q[i * bv.len() + j]).collect()).collect();
    Ok(QGrid { a_name: spec.a.name.clone(), b_name: spec.b.name.clone(), a_values: av, b_values: bv, values })
}
