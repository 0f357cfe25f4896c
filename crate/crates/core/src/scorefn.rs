//! Joint (VaR, ES) elicitability score function, empirical tail estimators
//! and landscape diagnostics.
//!
//! Sign convention: PnL samples, losses are negative values. VaR and ES of a
//! loss-making tail are negative numbers, and `es <= var` always holds when
//! both come from the same sample.
//!
//! The score of a candidate pair `(v, e)` against a realized PnL `x` at level
//! `alpha` with weight `w` is
//!
//! ```text
//! S(v,e,x) = (w/2) (1{x<=v} - alpha)(x^2 - v^2)
//!          + 1{x<=v} e (v - x)
//!          + alpha e (e/2 - v)
//! ```
//!
//! Its expectation is minimized exactly at the (VaR, ES) pair of the sample
//! distribution, which is what makes it usable as an adversarial loss and as
//! a backtesting statistic.

use crate::autodiff::{NodeId, Tape};
use crate::{Result, TailSimError};
use serde::{Deserialize, Serialize};

/// Quantile levels, per-level score weights and optional spectral weights for
/// multi-level training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskSpec {
    pub levels: Vec<f64>,
    pub w_alpha: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectral_weights: Option<Vec<f64>>,
}

impl RiskSpec {
    pub fn new(levels: Vec<f64>, w_alpha: Vec<f64>, spectral_weights: Option<Vec<f64>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(TailSimError::Domain("risk spec needs at least one level".into()));
        }
        if levels.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(TailSimError::Domain(format!("levels must lie in (0,1): {levels:?}")));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TailSimError::Domain(format!("levels must be strictly increasing: {levels:?}")));
        }
        if w_alpha.len() != levels.len() {
            return Err(TailSimError::Domain("one score weight per level required".into()));
        }
        if w_alpha.iter().any(|w| !(*w >= 1.0) || !w.is_finite()) {
            return Err(TailSimError::Domain(format!("score weights must be >= 1: {w_alpha:?}")));
        }
        if let Some(p) = &spectral_weights {
            if p.len() != levels.len() {
                return Err(TailSimError::Domain("spectral weights must match level count".into()));
            }
            if p.iter().any(|w| *w < 0.0) {
                return Err(TailSimError::Domain("spectral weights must be nonnegative".into()));
            }
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(TailSimError::Domain(format!("spectral weights must sum to 1, got {s}")));
            }
        }
        Ok(RiskSpec { levels, w_alpha, spectral_weights })
    }

    /// Single level with the default weight `w = 10`.
    pub fn single(alpha: f64) -> Result<Self> {
        RiskSpec::new(vec![alpha], vec![10.0], None)
    }

    pub fn single_with_weight(alpha: f64, w: f64) -> Result<Self> {
        RiskSpec::new(vec![alpha], vec![w], None)
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    fn require_single(&self) -> Result<(f64, f64)> {
        if self.levels.len() != 1 {
            return Err(TailSimError::Domain(format!(
                "operation requires a single-level spec, got {} levels",
                self.levels.len()
            )));
        }
        Ok((self.levels[0], self.w_alpha[0]))
    }

    /// Effective per-level weights for the multi-level score: the spectral
    /// weights when present, otherwise uniform.
    pub fn level_weights(&self) -> Vec<f64> {
        match &self.spectral_weights {
            Some(p) => p.clone(),
            None => vec![1.0 / self.levels.len() as f64; self.levels.len()],
        }
    }
}

/// An estimated (VaR, ES) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub var: f64,
    pub es: f64,
}

/// Warning text when the `ES/VaR >= w` consistency condition fails for an
/// estimate; the condition is advisory, not enforced.
pub fn w_constraint_warning(alpha: f64, w: f64, est: &TailEstimate) -> Option<String> {
    if est.var < 0.0 && est.es / est.var < w {
        Some(format!(
            "score weight {w} exceeds ES/VaR = {:.4} at level {alpha}; the expected score may lose convexity away from the minimum",
            est.es / est.var
        ))
    } else {
        None
    }
}

pub(crate) fn score_value(alpha: f64, w: f64, v: f64, e: f64, x: f64) -> f64 {
    let ind = if x <= v { 1.0 } else { 0.0 };
    0.5 * w * (ind - alpha) * (x * x - v * v) + ind * e * (v - x) + alpha * e * (0.5 * e - v)
}

/// Single-level score `S(v, e, x)`.
pub fn score(spec: &RiskSpec, v: f64, e: f64, x: f64) -> Result<f64> {
    let (alpha, w) = spec.require_single()?;
    if !v.is_finite() || !e.is_finite() || !x.is_finite() {
        return Err(TailSimError::Domain(format!("score inputs must be finite: v={v}, e={e}, x={x}")));
    }
    Ok(score_value(alpha, w, v, e, x))
}

/// Arithmetic mean of the score over a sample.
pub fn expected_score(spec: &RiskSpec, v: f64, e: f64, samples: &[f64]) -> Result<f64> {
    let (alpha, w) = spec.require_single()?;
    if samples.is_empty() {
        return Err(TailSimError::Domain("expected_score over an empty sample".into()));
    }
    if !v.is_finite() || !e.is_finite() {
        return Err(TailSimError::Domain(format!("expected_score inputs must be finite: v={v}, e={e}")));
    }
    // compensated summation keeps the finite-difference Hessian usable
    let mut acc = 0.0;
    let mut comp = 0.0;
    for &x in samples {
        if !x.is_finite() {
            return Err(TailSimError::Domain(format!("expected_score sample must be finite: {x}")));
        }
        let term = score_value(alpha, w, v, e, x) - comp;
        let next = acc + term;
        comp = (next - acc) - term;
        acc = next;
    }
    Ok(acc / samples.len() as f64)
}

fn ceil_tol(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

fn floor_tol(x: f64) -> usize {
    (x + 1e-9).floor().max(0.0) as usize
}

/// Empirical VaR and ES by order statistics: VaR is the `ceil(alpha n)`-th
/// smallest sample, ES the mean of the `floor(alpha n)` smallest.
pub fn empirical_var_es(samples: &[f64], alpha: f64) -> Result<TailEstimate> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(TailSimError::Domain(format!("level must lie in (0,1), got {alpha}")));
    }
    let n = samples.len();
    let min_n = ceil_tol(1.0 / alpha);
    if n < min_n {
        return Err(TailSimError::Domain(format!(
            "need at least {min_n} samples for level {alpha}, got {n}"
        )));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let an = alpha * n as f64;
    let k_var = ceil_tol(an).clamp(1, n);
    let k_es = floor_tol(an).clamp(1, n);
    let var = sorted[k_var - 1];
    let es = sorted[..k_es].iter().sum::<f64>() / k_es as f64;
    Ok(TailEstimate { var, es })
}

/// Central finite-difference Hessian of the empirical expected score at
/// `(v, e)`, step `1e-4 * max(1, |v|, |e|)`.
pub fn landscape_hessian(spec: &RiskSpec, v: f64, e: f64, samples: &[f64]) -> Result<[[f64; 2]; 2]> {
    let h = 1e-4 * v.abs().max(e.abs()).max(1.0);
    let f = |vv: f64, ee: f64| expected_score(spec, vv, ee, samples);
    let f0 = f(v, e)?;
    let h_vv = (f(v + h, e)? - 2.0 * f0 + f(v - h, e)?) / (h * h);
    let h_ee = (f(v, e + h)? - 2.0 * f0 + f(v, e - h)?) / (h * h);
    let cross = (f(v + h, e + h)? - f(v + h, e - h)? - f(v - h, e + h)? + f(v - h, e - h)?) / (4.0 * h * h);
    Ok([[h_vv, cross], [cross, h_ee]])
}

/// Eigenvalues of a symmetric 2x2 matrix, ascending.
pub fn sym22_eigenvalues(h: &[[f64; 2]; 2]) -> (f64, f64) {
    let tr = h[0][0] + h[1][1];
    let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    (tr / 2.0 - disc, tr / 2.0 + disc)
}

/// Closed-form second derivative `d^2 s / d e^2` for the exponential second
/// Fissler-Ziegel component under Uniform[-1,1] at level 0.05. Its negativity
/// for `v = -0.9, e < -1.95` is the diagnostic showing why the quadratic pair
/// is used instead.
pub fn exp_h2_counterexample(v: f64, e: f64) -> f64 {
    const ALPHA: f64 = 0.05;
    (e.exp() / ALPHA) * (0.25 * (v + 0.9) * (v + 0.9) + 0.0475 + ALPHA + 0.05 * e)
}

/// Spectral-weighted sum of single-level scores; reduces to `score` for one
/// level with weight 1.
pub fn multilevel_score(spec: &RiskSpec, estimates: &[TailEstimate], x: f64) -> Result<f64> {
    if estimates.len() != spec.levels.len() {
        return Err(TailSimError::Domain(format!(
            "need one estimate per level: {} levels, {} estimates",
            spec.levels.len(),
            estimates.len()
        )));
    }
    let weights = spec.level_weights();
    let mut acc = 0.0;
    for (m, est) in estimates.iter().enumerate() {
        if !est.var.is_finite() || !est.es.is_finite() || !x.is_finite() {
            return Err(TailSimError::Domain("multilevel_score inputs must be finite".into()));
        }
        acc += weights[m] * score_value(spec.levels[m], spec.w_alpha[m], est.var, est.es, x);
    }
    Ok(acc)
}

/// Grid argmin of the empirical expected score, evaluated via an exact
/// prefix-sum decomposition so large grids stay cheap.
///
/// Returns `(v, e, value)` at the grid minimizer. The decomposition is
/// algebraically identical to averaging `score` over the sample; a unit test
/// pins the two routes against each other.
pub fn expected_score_argmin_grid(
    samples: &[f64],
    alpha: f64,
    w: f64,
    v_grid: &[f64],
    e_grid: &[f64],
) -> Result<(f64, f64, f64)> {
    if samples.is_empty() || v_grid.is_empty() || e_grid.is_empty() {
        return Err(TailSimError::Domain("empty sample or grid".into()));
    }
    let n = samples.len();
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let mut prefix_x = vec![0.0; n + 1];
    let mut prefix_x2 = vec![0.0; n + 1];
    for (i, &x) in sorted.iter().enumerate() {
        prefix_x[i + 1] = prefix_x[i] + x;
        prefix_x2[i + 1] = prefix_x2[i] + x * x;
    }
    let m2 = prefix_x2[n] / n as f64;

    let mut best = (v_grid[0], e_grid[0], f64::INFINITY);
    for &v in v_grid {
        let k = sorted.partition_point(|&x| x <= v);
        let fv = k as f64 / n as f64;
        let a = prefix_x2[k] / n as f64;
        let b = prefix_x[k] / n as f64;
        let t1 = 0.5 * w * (a - fv * v * v - alpha * (m2 - v * v));
        let lin = fv * v - b;
        for &e in e_grid {
            let s = t1 + e * lin + alpha * e * (0.5 * e - v);
            if s < best.2 {
                best = (v, e, s);
            }
        }
    }
    Ok(best)
}

/// Builds the mean score over a column of PnL samples on a tape.
///
/// `v` and `e` are `(1,1)` nodes (typically discriminator outputs), `x` is an
/// `(n,1)` constant column of realized PnLs. The indicator is a stopped
/// gradient; all other terms backpropagate.
pub fn score_graph(
    tape: &mut Tape,
    alpha: f64,
    w: f64,
    v: NodeId,
    e: NodeId,
    x: NodeId,
) -> Result<NodeId> {
    let ind = tape.indicator_leq(x, v)?;
    let ind_centered = tape.add_scalar(ind, -alpha);
    let x2 = tape.square(x);
    let v2 = tape.square(v);
    let d2 = tape.sub(x2, v2)?;
    let quad = tape.mul(ind_centered, d2)?;
    let t1 = tape.scale(quad, 0.5 * w);
    let vmx = tape.sub(v, x)?;
    let evmx = tape.mul(e, vmx)?;
    let t2 = tape.mul(ind, evmx)?;
    let s12 = tape.add(t1, t2)?;
    let m12 = tape.mean(s12);
    let half_e = tape.scale(e, 0.5);
    let he_v = tape.sub(half_e, v)?;
    let t3_raw = tape.mul(e, he_v)?;
    let t3 = tape.scale(t3_raw, alpha);
    tape.add(m12, t3)
}
