//! Temperature-controlled relaxation of the descending-sort permutation.
//!
//! The relaxation maps a vector `x` of length `n` to a row-stochastic matrix
//! whose row `i` concentrates, as the temperature goes to zero, on the index
//! of the `i`-th largest entry. Multiplying by `x` then yields a
//! differentiable approximation of `x` sorted in decreasing order, which is
//! what lets gradients flow through the rank-based front end of the
//! discriminator.
//!
//! Row `i` (1-indexed) is `softmax_j(((n+1-2i) * x_j - (B(x) 1)_j) / tau)`
//! with `B(x)` the matrix of absolute pairwise differences. The softmax is
//! computed stably (row max subtracted before exponentiation).

use crate::autodiff::{softmax_rows_value, NodeId, Tape};
use crate::{Result, TailSimError};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Temperature for the sorting relaxation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SortConfig {
    pub temperature: f64,
}

impl Default for SortConfig {
    fn default() -> Self {
        SortConfig { temperature: 0.1 }
    }
}

impl SortConfig {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(TailSimError::Domain(format!(
                "sort temperature must be positive and finite, got {temperature}"
            )));
        }
        Ok(SortConfig { temperature })
    }
}

/// `B[i,j] = |x_i - x_j|`; symmetric with zero diagonal.
pub fn pairwise_abs_diff(x: &[f64]) -> Array2<f64> {
    let n = x.len();
    Array2::from_shape_fn((n, n), |(i, j)| (x[i] - x[j]).abs())
}

pub(crate) fn relaxed_perm_values(x: &[f64], tau: f64) -> Array2<f64> {
    let n = x.len();
    // b_j = sum_l |x_j - x_l|
    let mut b = vec![0.0; n];
    for j in 0..n {
        let mut acc = 0.0;
        for l in 0..n {
            acc += (x[j] - x[l]).abs();
        }
        b[j] = acc;
    }
    let mut logits = Array2::zeros((n, n));
    for i in 0..n {
        let c = (n as f64) + 1.0 - 2.0 * (i as f64 + 1.0);
        for j in 0..n {
            logits[(i, j)] = (c * x[j] - b[j]) / tau;
        }
    }
    softmax_rows_value(&logits)
}

/// Row-stochastic relaxation of the descending-sort permutation.
pub fn relaxed_perm(x: &[f64], cfg: &SortConfig) -> Result<Array2<f64>> {
    if x.is_empty() {
        return Err(TailSimError::Domain("relaxed_perm needs at least one element".into()));
    }
    Ok(relaxed_perm_values(x, cfg.temperature))
}

/// `relaxed_perm(x) . x`: differentiable approximation of the descending sort.
pub fn soft_sort(x: &[f64], cfg: &SortConfig) -> Result<Vec<f64>> {
    let p = relaxed_perm(x, cfg)?;
    let n = x.len();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            acc += p[(i, j)] * x[j];
        }
        out[i] = acc;
    }
    Ok(out)
}

/// Exact descending stable sort; the oracle for the relaxation and the
/// non-differentiable evaluation paths.
pub fn hard_sort_desc(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    out.sort_by(|a, b| b.partial_cmp(a).expect("finite sort keys"));
    out
}

/// Builds the relaxation on a tape: `(n,1)` column in, `(n,1)` soft-sorted
/// column out. Delegates to the fused tape op.
pub fn soft_sort_graph(tape: &mut Tape, x: NodeId, cfg: &SortConfig) -> Result<NodeId> {
    tape.soft_sort(x, cfg.temperature)
}
