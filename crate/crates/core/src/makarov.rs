//! Sharp distributional bounds on the treatment effect from the marginal
//! outcome distributions of the two arms.
//!
//! With only the marginals `F1` and `F0` identified, the distribution of
//! `Y(1) - Y(0)` is partially identified. The pointwise-sharp envelope is
//!
//! ```text
//! lower(d) = max(0, sup_y { F1(y) - F0(y - d) })
//! upper(d) = 1 + min(0, inf_y { F1(y) - F0(y - d) })
//! ```
//!
//! with quantile counterparts obtained from the arm quantile functions.
//! This module computes those envelopes over finite candidate grids, the
//! exact variants for discrete marginals, the binary-outcome special case,
//! and the closed form for equal-variance normal arms.

use crate::error::{Error, Result};
use crate::grid::{EvalGrid, GridCdf, GridQuantile};
use crate::stats::{norm_cdf, norm_quantile};

/// Tie tolerance for optimizer locations: every candidate within this much
/// of the optimum is reported as an optimizer.
pub const ARG_TIE_TOL: f64 = 1e-9;

/// An optimum together with the ascending set of candidates attaining it
/// (within [`ARG_TIE_TOL`]). Consumers that need a single location take the
/// smallest member.
#[derive(Debug, Clone, PartialEq)]
pub struct ArgOpt {
    pub value: f64,
    pub args: Vec<f64>,
}

impl ArgOpt {
    /// The smallest optimizer; the canonical tie-breaking choice.
    pub fn smallest(&self) -> f64 {
        self.args[0]
    }
}

/// Which treatment-effect summary a set of bounds refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimandKind {
    /// `P(Y(1) - Y(0) <= d)` as a function of the effect value `d`.
    Cdf,
    /// The effect quantile as a function of the level `alpha`.
    Quantile,
}

impl std::fmt::Display for EstimandKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EstimandKind::Cdf => "cdf",
            EstimandKind::Quantile => "quantile",
        })
    }
}

impl std::str::FromStr for EstimandKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cdf" => Ok(EstimandKind::Cdf),
            "quantile" => Ok(EstimandKind::Quantile),
            other => Err(Error::UnsupportedEstimand(other.into())),
        }
    }
}

/// A lower/upper envelope tabulated on a grid (effect values for the CDF
/// estimand, levels for the quantile estimand). `lower[i] <= upper[i]`
/// always holds; for the quantile estimand the lower curve is the inverse
/// of the upper CDF bound and vice versa.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundsPair {
    pub kind: EstimandKind,
    pub grid: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoundsPair {
    pub fn new(
        kind: EstimandKind,
        grid: Vec<f64>,
        lower: Vec<f64>,
        upper: Vec<f64>,
    ) -> Result<Self> {
        if lower.len() != grid.len() || upper.len() != grid.len() {
            return Err(Error::InvalidValues(format!(
                "bounds lengths ({}, {}) do not match grid length {}",
                lower.len(),
                upper.len(),
                grid.len()
            )));
        }
        if grid.is_empty() {
            return Err(Error::InvalidGrid("bounds grid is empty".into()));
        }
        if lower.iter().chain(upper.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidValues("non-finite bound value".into()));
        }
        for i in 0..grid.len() {
            if lower[i] > upper[i] + 1e-9 {
                return Err(Error::InvalidValues(format!(
                    "lower bound {} exceeds upper bound {} at grid point {}",
                    lower[i], upper[i], grid[i]
                )));
            }
        }
        if kind == EstimandKind::Cdf {
            let ok = |v: f64| (-1e-9..=1.0 + 1e-9).contains(&v);
            if !lower.iter().chain(upper.iter()).all(|v| ok(*v)) {
                return Err(Error::InvalidValues("cdf bounds must lie in [0, 1]".into()));
            }
        }
        Ok(Self {
            kind,
            grid,
            lower,
            upper,
        })
    }

    /// Pointwise width of the identified interval.
    pub fn widths(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| u - l)
            .collect()
    }
}

fn check_candidates(candidates: &[f64]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates("convolution candidate grid"));
    }
    if candidates.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidGrid(
            "convolution candidates must be finite".into(),
        ));
    }
    Ok(())
}

fn tie_set(candidates: &[f64], vals: &[f64], keep: impl Fn(f64) -> bool) -> Vec<f64> {
    let mut args: Vec<f64> = candidates
        .iter()
        .zip(vals)
        .filter(|(_, v)| keep(**v))
        .map(|(c, _)| *c)
        .collect();
    args.sort_by(|a, b| a.partial_cmp(b).unwrap());
    args
}

/// `sup_y { f1(y) - f0(y - delta) }` over the candidate grid.
pub fn sup_convolution(
    f1: impl Fn(f64) -> f64,
    f0: impl Fn(f64) -> f64,
    delta: f64,
    candidates: &[f64],
) -> Result<ArgOpt> {
    check_candidates(candidates)?;
    let mut best = f64::NEG_INFINITY;
    let vals: Vec<f64> = candidates
        .iter()
        .map(|&c| {
            let v = f1(c) - f0(c - delta);
            if v > best {
                best = v;
            }
            v
        })
        .collect();
    if !best.is_finite() {
        return Err(Error::InvalidValues(
            "non-finite value in sup-convolution".into(),
        ));
    }
    let args = tie_set(candidates, &vals, |v| v >= best - ARG_TIE_TOL);
    Ok(ArgOpt { value: best, args })
}

/// `inf_y { f1(y) - f0(y - delta) }` over the candidate grid.
pub fn inf_convolution(
    f1: impl Fn(f64) -> f64,
    f0: impl Fn(f64) -> f64,
    delta: f64,
    candidates: &[f64],
) -> Result<ArgOpt> {
    check_candidates(candidates)?;
    let mut best = f64::INFINITY;
    let vals: Vec<f64> = candidates
        .iter()
        .map(|&c| {
            let v = f1(c) - f0(c - delta);
            if v < best {
                best = v;
            }
            v
        })
        .collect();
    if !best.is_finite() {
        return Err(Error::InvalidValues(
            "non-finite value in inf-convolution".into(),
        ));
    }
    let args = tie_set(candidates, &vals, |v| v <= best + ARG_TIE_TOL);
    Ok(ArgOpt { value: best, args })
}

/// Optimizer detail for one effect value: the sup and inf convolutions that
/// produced the lower and upper bound there.
#[derive(Debug, Clone)]
pub struct CdfBoundDetail {
    pub sup: ArgOpt,
    pub inf: ArgOpt,
}

/// CDF bounds on each `delta`, searching over `candidates`, together with
/// the optimizer locations needed by the correction terms.
pub fn cdf_bounds_detailed(
    f1: impl Fn(f64) -> f64,
    f0: impl Fn(f64) -> f64,
    deltas: &[f64],
    candidates: &[f64],
) -> Result<(BoundsPair, Vec<CdfBoundDetail>)> {
    let mut lower = Vec::with_capacity(deltas.len());
    let mut upper = Vec::with_capacity(deltas.len());
    let mut details = Vec::with_capacity(deltas.len());
    for &d in deltas {
        let sup = sup_convolution(&f1, &f0, d, candidates)?;
        let inf = inf_convolution(&f1, &f0, d, candidates)?;
        lower.push(sup.value.max(0.0));
        upper.push((1.0 + inf.value.min(0.0)).clamp(0.0, 1.0));
        details.push(CdfBoundDetail { sup, inf });
    }
    let pair = BoundsPair::new(EstimandKind::Cdf, deltas.to_vec(), lower, upper)?;
    Ok((pair, details))
}

/// CDF bounds for tabulated arm CDFs over the evaluation grid: each delta
/// value is bounded by searching the outcome grid.
pub fn cdf_bounds(f1: &GridCdf, f0: &GridCdf, grid: &EvalGrid) -> Result<BoundsPair> {
    cdf_bounds_detailed(|y| f1.eval(y), |y| f0.eval(y), &grid.delta, &grid.y).map(|(p, _)| p)
}

/// Optimizer detail for one level: the location `u` of the inner optimum on
/// each side, in the unit interval.
#[derive(Debug, Clone)]
pub struct QuantileBoundDetail {
    /// Minimizer of `q1(u) - q0(u - alpha)` over `[alpha, 1]`.
    pub lower_side: ArgOpt,
    /// Maximizer of `q1(u) - q0(u - alpha + 1)` over `[0, alpha]`.
    pub upper_side: ArgOpt,
}

fn check_level(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!(
            "quantile level {alpha} outside (0, 1)"
        )));
    }
    Ok(())
}

/// Candidates for the inner quantile search: the level grid restricted to
/// the closed interval, with the interval endpoints appended.
fn restrict_levels(levels: &[f64], lo: f64, hi: f64) -> Result<Vec<f64>> {
    let mut us = vec![lo];
    us.extend(levels.iter().cloned().filter(|u| *u > lo && *u < hi));
    us.push(hi);
    if us.len() < 2 {
        return Err(Error::InvalidGrid(format!(
            "fewer than two search points in [{lo}, {hi}]"
        )));
    }
    Ok(us)
}

/// Inverse of the lower CDF bound at `alpha`:
/// `min over u in [alpha, 1] of q1(u) - q0(u - alpha)`, searched over the
/// level grid restricted to that interval (endpoints included). This is the
/// upper endpoint of the identified quantile interval.
pub fn quantile_lower_inverse(
    q1: impl Fn(f64) -> f64,
    q0: impl Fn(f64) -> f64,
    alpha: f64,
    levels: &[f64],
) -> Result<ArgOpt> {
    check_level(alpha)?;
    let us = restrict_levels(levels, alpha, 1.0)?;
    let mut best = f64::INFINITY;
    let vals: Vec<f64> = us
        .iter()
        .map(|&u| {
            let v = q1(u) - q0(u - alpha);
            if v < best {
                best = v;
            }
            v
        })
        .collect();
    if !best.is_finite() {
        return Err(Error::InvalidValues(
            "non-finite value in quantile bound search".into(),
        ));
    }
    let args = tie_set(&us, &vals, |v| v <= best + ARG_TIE_TOL);
    Ok(ArgOpt { value: best, args })
}

/// Inverse of the upper CDF bound at `alpha`:
/// `max over u in [0, alpha] of q1(u) - q0(u - alpha + 1)`, searched over
/// the level grid restricted to that interval (endpoints included). This is
/// the lower endpoint of the identified quantile interval.
pub fn quantile_upper_inverse(
    q1: impl Fn(f64) -> f64,
    q0: impl Fn(f64) -> f64,
    alpha: f64,
    levels: &[f64],
) -> Result<ArgOpt> {
    check_level(alpha)?;
    let us = restrict_levels(levels, 0.0, alpha)?;
    let mut best = f64::NEG_INFINITY;
    let vals: Vec<f64> = us
        .iter()
        .map(|&u| {
            let v = q1(u) - q0(u - alpha + 1.0);
            if v > best {
                best = v;
            }
            v
        })
        .collect();
    if !best.is_finite() {
        return Err(Error::InvalidValues(
            "non-finite value in quantile bound search".into(),
        ));
    }
    let args = tie_set(&us, &vals, |v| v >= best - ARG_TIE_TOL);
    Ok(ArgOpt { value: best, args })
}

/// Quantile bounds on each level in `alphas`, with the inner optimizer
/// locations; `levels` is the search grid for the inner optimizations.
pub fn quantile_bounds_detailed(
    q1: impl Fn(f64) -> f64,
    q0: impl Fn(f64) -> f64,
    alphas: &[f64],
    levels: &[f64],
) -> Result<(BoundsPair, Vec<QuantileBoundDetail>)> {
    let mut lower = Vec::with_capacity(alphas.len());
    let mut upper = Vec::with_capacity(alphas.len());
    let mut details = Vec::with_capacity(alphas.len());
    for &a in alphas {
        let lo_side = quantile_lower_inverse(&q1, &q0, a, levels)?;
        let up_side = quantile_upper_inverse(&q1, &q0, a, levels)?;
        // the upper-CDF inverse is the smaller endpoint of the interval
        lower.push(up_side.value);
        upper.push(lo_side.value);
        details.push(QuantileBoundDetail {
            lower_side: lo_side,
            upper_side: up_side,
        });
    }
    let pair = BoundsPair::new(EstimandKind::Quantile, alphas.to_vec(), lower, upper)?;
    Ok((pair, details))
}

/// Quantile bounds for tabulated arm quantile functions over the
/// evaluation grid (its alpha grid doubles as the inner search grid).
pub fn quantile_bounds(
    q1: &GridQuantile,
    q0: &GridQuantile,
    grid: &EvalGrid,
) -> Result<BoundsPair> {
    quantile_bounds_detailed(|u| q1.eval(u), |u| q0.eval(u), &grid.alpha, &grid.alpha)
        .map(|(p, _)| p)
}

/// A finitely supported distribution with strictly increasing support.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDist {
    support: Vec<f64>,
    probs: Vec<f64>,
    cum: Vec<f64>,
}

impl DiscreteDist {
    pub fn new(support: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::InvalidData("discrete support is empty".into()));
        }
        if support.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidData("non-finite support point".into()));
        }
        if support.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidData(
                "discrete support must be strictly increasing".into(),
            ));
        }
        if probs.len() != support.len() {
            return Err(Error::InvalidData(format!(
                "{} support points but {} probabilities",
                support.len(),
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(Error::InvalidData(
                "discrete probabilities must be strictly positive".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidData(format!(
                "discrete probabilities sum to {total}, not 1"
            )));
        }
        let mut cum = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for &p in &probs {
            acc += p;
            cum.push(acc);
        }
        // pin the top of the CDF so comparisons at the right tail are exact
        *cum.last_mut().unwrap() = 1.0;
        Ok(Self {
            support,
            probs,
            cum,
        })
    }

    /// Equal-probability distribution on the given points.
    pub fn uniform_on(support: Vec<f64>) -> Result<Self> {
        let n = support.len();
        if n == 0 {
            return Err(Error::InvalidData("discrete support is empty".into()));
        }
        let p = 1.0 / n as f64;
        Self::new(support, vec![p; n])
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Right-continuous CDF.
    pub fn cdf(&self, y: f64) -> f64 {
        let i = self.support.partition_point(|s| *s <= y + 1e-12);
        if i == 0 {
            0.0
        } else {
            self.cum[i - 1]
        }
    }

    /// Point mass at `y` (0 if `y` is not a support point, matched to
    /// within a small absolute tolerance).
    pub fn pmf_at(&self, y: f64) -> f64 {
        let i = self.support.partition_point(|s| *s < y - 1e-9);
        if i < self.support.len() && (self.support[i] - y).abs() <= 1e-9 {
            self.probs[i]
        } else {
            0.0
        }
    }
}

/// Exact CDF bounds at one effect value for discrete marginals.
///
/// The optimizations run over the union of `d1`'s support and `d0`'s
/// support shifted by `delta`, which contains every point where either step
/// function moves. The sup side credits the atom of `d0` at the candidate
/// (the left limit of `F0` there); the inf side must not, because the
/// infimum is attained on the open intervals between atoms where both step
/// functions sit at their right-continuous values. Both searches include
/// the far-left tail, where the objective is 0.
pub fn cdf_bounds_mixed(d1: &DiscreteDist, d0: &DiscreteDist, delta: f64) -> Result<(f64, f64)> {
    if !delta.is_finite() {
        return Err(Error::Domain(format!("effect value {delta} not finite")));
    }
    let mut candidates: Vec<f64> = d1
        .support
        .iter()
        .cloned()
        .chain(d0.support.iter().map(|s| s + delta))
        .collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
    let mut sup = 0.0f64;
    let mut inf = 0.0f64;
    for &c in &candidates {
        let base = d1.cdf(c) - d0.cdf(c - delta);
        sup = sup.max(base + d0.pmf_at(c - delta));
        inf = inf.min(base);
    }
    Ok((sup.max(0.0), (1.0 + inf).clamp(0.0, 1.0)))
}

/// Sharp bounds on the fraction harmed for binary outcomes,
/// `P(Y(1) = 0, Y(0) = 1)`, averaged over units. Inputs are the per-unit
/// success probabilities of each arm.
pub fn fna_bounds(mu1: &[f64], mu0: &[f64]) -> Result<(f64, f64)> {
    if mu1.is_empty() || mu1.len() != mu0.len() {
        return Err(Error::InvalidData(format!(
            "fraction-harmed inputs have lengths {} and {}",
            mu1.len(),
            mu0.len()
        )));
    }
    let ok = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
    if !mu1.iter().chain(mu0.iter()).all(|v| ok(*v)) {
        return Err(Error::InvalidData(
            "success probabilities must lie in [0, 1]".into(),
        ));
    }
    let n = mu1.len() as f64;
    let mut lo = 0.0;
    let mut hi = 0.0;
    for (&m1, &m0) in mu1.iter().zip(mu0) {
        lo += (m0 - m1).max(0.0);
        hi += m0.min(1.0 - m1);
    }
    Ok((lo / n, hi / n))
}

/// Closed-form CDF bounds when both arms are normal with a common scale:
/// `Y(1) ~ N(mu1, sigma^2)`, `Y(0) ~ N(mu0, sigma^2)`. With
/// `tau = mu1 - mu0` and `s = 2 Phi((delta - tau) / (2 sigma)) - 1` the
/// bounds are `(max(0, s), min(1, 1 + s))`; both are half-normal-shaped
/// CDFs in `delta` around `tau`.
pub fn analytic_normal_bounds(mu1: f64, mu0: f64, sigma: f64, delta: f64) -> Result<(f64, f64)> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::Domain(format!("scale {sigma} must be positive")));
    }
    if !delta.is_finite() || !mu1.is_finite() || !mu0.is_finite() {
        return Err(Error::Domain("non-finite bound argument".into()));
    }
    let s = 2.0 * norm_cdf((delta - (mu1 - mu0)) / (2.0 * sigma)) - 1.0;
    Ok((s.max(0.0), (1.0 + s).min(1.0)))
}

/// Closed-form quantile bounds in the same normal model, returned as
/// (lower endpoint, upper endpoint) of the identified interval.
pub fn analytic_normal_quantile_bounds(
    mu1: f64,
    mu0: f64,
    sigma: f64,
    alpha: f64,
) -> Result<(f64, f64)> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::Domain(format!("scale {sigma} must be positive")));
    }
    check_level(alpha)?;
    let tau = mu1 - mu0;
    let lo = tau + 2.0 * sigma * norm_quantile(alpha / 2.0);
    let hi = tau + 2.0 * sigma * norm_quantile((1.0 + alpha) / 2.0);
    Ok((lo, hi))
}
