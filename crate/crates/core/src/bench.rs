//! Synthetic benchmark settings with known ground truth, verification
//! oracles (exact couplings, Monte Carlo enclosure, an orthogonality
//! probe), and the metric pipeline that scores learners against the truth.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::grid::{
    crps_distance, project_to_cdf, project_to_quantile, w2_sq_distance, EvalGrid, GridCdf,
    GridQuantile,
};
use crate::learners::{
    fit_second_stage, plugin_bounds, predict_bounds, pseudo_surface_with, train_learner,
    CondNuisance, LearnerConfig, LearnerKind, LossKind,
};
use crate::makarov::{
    analytic_normal_bounds, analytic_normal_quantile_bounds, cdf_bounds_detailed, cdf_bounds_mixed,
    quantile_bounds_detailed, BoundsPair, DiscreteDist, EstimandKind,
};
use crate::nuisance::{clip_propensity, CdfMethod, DEFAULT_CLIP_FLOOR};
use crate::stats::{linspace, norm_cdf, norm_pdf, norm_quantile, sigmoid};

/// Conditional outcome law of the synthetic data-generating process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SettingKind {
    /// `Y | X, A ~ N(mu_A(X), 1)`.
    Normal,
    /// Gaussian mixtures around `mu_0(X)` with arm-specific shape.
    Multimodal,
    /// `Y | X, A ~ Exp(1 / |mu_A(X)|)`.
    Exponential,
}

impl std::fmt::Display for SettingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SettingKind::Normal => "normal",
            SettingKind::Multimodal => "multimodal",
            SettingKind::Exponential => "exponential",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for SettingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(SettingKind::Normal),
            "multimodal" => Ok(SettingKind::Multimodal),
            "exponential" => Ok(SettingKind::Exponential),
            other => Err(Error::Config(format!(
                "unknown synthetic setting '{other}'"
            ))),
        }
    }
}

/// A fully specified synthetic benchmark instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SynthSetting {
    pub kind: SettingKind,
    pub seed: u64,
}

impl SynthSetting {
    pub fn new(kind: SettingKind, seed: u64) -> Self {
        Self { kind, seed }
    }
}

/// Treatment assignment probability `P(A=1 | X=x)` of the generator.
pub fn true_propensity(x: &[f64]) -> f64 {
    sigmoid(0.75 * x[0] - x[1] + 0.5)
}

/// Conditional location `mu_A(x)` shared by all three settings.
pub fn conditional_mean(arm: u8, x: &[f64]) -> f64 {
    let a = f64::from(arm);
    (2.0 * a - 1.0) * x[0] + a - 2.0 * (2.0 * x[0] + x[1]).sin() - 2.0 * x[1] * (1.0 + 0.5 * x[0])
}

/// Mixture components of the multimodal setting as (weight, offset from
/// `mu_0(x)`, scale).
const MULTI_ARM0: [(f64, f64, f64); 2] = [(0.7, -0.5, 1.5), (0.3, 1.5, 0.5)];
const MULTI_ARM1: [(f64, f64, f64); 3] = [(0.3, -2.5, 0.35), (0.4, 0.5, 0.75), (0.3, 2.0, 0.5)];

fn multimodal_components(arm: u8) -> &'static [(f64, f64, f64)] {
    if arm == 1 {
        &MULTI_ARM1
    } else {
        &MULTI_ARM0
    }
}

/// Exponential rates below this mean magnitude are degenerate; generation
/// resamples the row and evaluation floors the scale here.
const EXP_MEAN_FLOOR: f64 = 1e-6;

/// Draw `n` i.i.d. rows of the synthetic process. Each row uses its own
/// counter stream of the seeded generator, so prefixes agree across calls
/// with different `n` and generation can be split by row range.
pub fn generate_synth(setting: &SynthSetting, n: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("cannot generate an empty dataset".into()));
    }
    let mut xs = Vec::with_capacity(2 * n);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for row in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(setting.seed);
        rng.set_stream(row as u64 + 1);
        let (x1, x2, ai, yi) = loop {
            let x1 = rng.random_range(-2.0..2.0);
            let x2: f64 = rng.sample(StandardNormal);
            let ai = u8::from(rng.random::<f64>() < true_propensity(&[x1, x2]));
            let mu = conditional_mean(ai, &[x1, x2]);
            match setting.kind {
                SettingKind::Normal => {
                    let z: f64 = rng.sample(StandardNormal);
                    break (x1, x2, ai, mu + z);
                }
                SettingKind::Multimodal => {
                    let mu0 = conditional_mean(0, &[x1, x2]);
                    let pick = rng.random::<f64>();
                    let z: f64 = rng.sample(StandardNormal);
                    let comps = multimodal_components(ai);
                    let mut cum = 0.0;
                    let mut chosen = comps[comps.len() - 1];
                    for c in comps {
                        cum += c.0;
                        if pick < cum {
                            chosen = *c;
                            break;
                        }
                    }
                    break (x1, x2, ai, mu0 + chosen.1 + chosen.2 * z);
                }
                SettingKind::Exponential => {
                    if mu.abs() < EXP_MEAN_FLOOR {
                        continue; // degenerate rate: redraw the whole row
                    }
                    let u = rng.random::<f64>();
                    break (x1, x2, ai, -mu.abs() * (-u).ln_1p());
                }
            }
        };
        xs.push(x1);
        xs.push(x2);
        a.push(ai);
        y.push(yi);
    }
    Dataset::new(xs, a, y, 2)
}

// ---------------------------------------------------------------------------
// Ground truth
// ---------------------------------------------------------------------------

/// Number of outcome candidates used by the numeric bound routes.
const TRUTH_CANDIDATES: usize = 2001;
/// Half-width of the candidate span in conditional standard deviations.
const TRUTH_SPAN_SDS: f64 = 8.0;

/// Exact conditional laws and treatment-effect bounds of a synthetic
/// setting. Doubles as an oracle nuisance view for the learners.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub kind: SettingKind,
    clip_floor: f64,
}

impl GroundTruth {
    pub fn new(kind: SettingKind) -> Self {
        Self {
            kind,
            clip_floor: DEFAULT_CLIP_FLOOR,
        }
    }

    pub fn with_clip_floor(mut self, floor: f64) -> Self {
        self.clip_floor = floor;
        self
    }

    fn exp_scale(&self, arm: u8, x: &[f64]) -> f64 {
        conditional_mean(arm, x).abs().max(EXP_MEAN_FLOOR)
    }

    /// Conditional outcome mean of `arm` at `x`.
    pub fn cond_mean(&self, arm: u8, x: &[f64]) -> f64 {
        match self.kind {
            SettingKind::Normal => conditional_mean(arm, x),
            SettingKind::Multimodal => {
                let mu0 = conditional_mean(0, x);
                let offset: f64 = multimodal_components(arm).iter().map(|c| c.0 * c.1).sum();
                mu0 + offset
            }
            SettingKind::Exponential => self.exp_scale(arm, x),
        }
    }

    /// Conditional outcome standard deviation of `arm` at `x`.
    pub fn cond_sd(&self, arm: u8, x: &[f64]) -> f64 {
        match self.kind {
            SettingKind::Normal => 1.0,
            SettingKind::Multimodal => {
                let comps = multimodal_components(arm);
                let m: f64 = comps.iter().map(|c| c.0 * c.1).sum();
                let second: f64 = comps.iter().map(|c| c.0 * (c.2 * c.2 + c.1 * c.1)).sum();
                (second - m * m).sqrt()
            }
            SettingKind::Exponential => self.exp_scale(arm, x),
        }
    }

    /// Conditional outcome CDF `F_arm(y | x)`.
    pub fn cond_cdf(&self, arm: u8, x: &[f64], y: f64) -> f64 {
        match self.kind {
            SettingKind::Normal => norm_cdf(y - conditional_mean(arm, x)),
            SettingKind::Multimodal => {
                let mu0 = conditional_mean(0, x);
                multimodal_components(arm)
                    .iter()
                    .map(|c| c.0 * norm_cdf((y - (mu0 + c.1)) / c.2))
                    .sum()
            }
            SettingKind::Exponential => {
                if y <= 0.0 {
                    0.0
                } else {
                    -(-y / self.exp_scale(arm, x)).exp_m1()
                }
            }
        }
    }

    /// Conditional outcome density `f_arm(y | x)`.
    pub fn cond_density(&self, arm: u8, x: &[f64], y: f64) -> f64 {
        match self.kind {
            SettingKind::Normal => norm_pdf(y - conditional_mean(arm, x)),
            SettingKind::Multimodal => {
                let mu0 = conditional_mean(0, x);
                multimodal_components(arm)
                    .iter()
                    .map(|c| c.0 / c.2 * norm_pdf((y - (mu0 + c.1)) / c.2))
                    .sum()
            }
            SettingKind::Exponential => {
                if y < 0.0 {
                    0.0
                } else {
                    let s = self.exp_scale(arm, x);
                    (-y / s).exp() / s
                }
            }
        }
    }

    /// Conditional outcome quantile; unavailable in closed form for the
    /// multimodal mixtures.
    pub fn cond_quantile(&self, arm: u8, x: &[f64], u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::Domain(format!("quantile level {u} outside (0, 1)")));
        }
        match self.kind {
            SettingKind::Normal => Ok(conditional_mean(arm, x) + norm_quantile(u)),
            SettingKind::Multimodal => Err(Error::UnsupportedEstimand(
                "closed-form quantiles of the multimodal mixtures".into(),
            )),
            SettingKind::Exponential => Ok(-self.exp_scale(arm, x) * (-u).ln_1p()),
        }
    }

    /// Outcome candidates for the numeric bound search at `x`.
    fn candidates(&self, x: &[f64]) -> Vec<f64> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for arm in [0u8, 1u8] {
            let m = self.cond_mean(arm, x);
            let s = self.cond_sd(arm, x);
            lo = lo.min(m - TRUTH_SPAN_SDS * s);
            hi = hi.max(m + TRUTH_SPAN_SDS * s);
        }
        linspace(lo, hi, TRUTH_CANDIDATES)
    }

    /// True CDF bounds at the given effect values.
    pub fn cdf_bounds_at(&self, x: &[f64], deltas: &[f64]) -> Result<BoundsPair> {
        match self.kind {
            SettingKind::Normal => {
                let mu1 = conditional_mean(1, x);
                let mu0 = conditional_mean(0, x);
                let mut lower = Vec::with_capacity(deltas.len());
                let mut upper = Vec::with_capacity(deltas.len());
                for &d in deltas {
                    let (lo, up) = analytic_normal_bounds(mu1, mu0, 1.0, d)?;
                    lower.push(lo);
                    upper.push(up);
                }
                BoundsPair::new(EstimandKind::Cdf, deltas.to_vec(), lower, upper)
            }
            _ => {
                let cand = self.candidates(x);
                cdf_bounds_detailed(
                    |y| self.cond_cdf(1, x, y),
                    |y| self.cond_cdf(0, x, y),
                    deltas,
                    &cand,
                )
                .map(|(pair, _)| pair)
            }
        }
    }

    /// True quantile bounds at the given levels.
    pub fn quantile_bounds_at(&self, x: &[f64], levels: &[f64]) -> Result<BoundsPair> {
        match self.kind {
            SettingKind::Normal => {
                let mu1 = conditional_mean(1, x);
                let mu0 = conditional_mean(0, x);
                let mut lower = Vec::with_capacity(levels.len());
                let mut upper = Vec::with_capacity(levels.len());
                for &a in levels {
                    let (lo, up) = analytic_normal_quantile_bounds(mu1, mu0, 1.0, a)?;
                    lower.push(lo);
                    upper.push(up);
                }
                BoundsPair::new(EstimandKind::Quantile, levels.to_vec(), lower, upper)
            }
            SettingKind::Multimodal => Err(Error::UnsupportedEstimand(
                "quantile ground truth for the multimodal setting".into(),
            )),
            SettingKind::Exponential => {
                let s1 = self.exp_scale(1, x);
                let s0 = self.exp_scale(0, x);
                // clamp keeps the endpoint levels appended by the search
                // finite; the optima are interior so this is inert
                let q = |s: f64| move |u: f64| -s * (-u.clamp(0.0, 1.0 - 1e-9)).ln_1p();
                let fine: Vec<f64> = (1..2001).map(|j| f64::from(j) / 2001.0).collect();
                quantile_bounds_detailed(q(s1), q(s0), levels, &fine).map(|(p, _)| p)
            }
        }
    }

    /// True bounds for either estimand, on the shared evaluation grid.
    pub fn true_bounds(
        &self,
        x: &[f64],
        grid: &EvalGrid,
        kind: EstimandKind,
    ) -> Result<BoundsPair> {
        match kind {
            EstimandKind::Cdf => self.cdf_bounds_at(x, &grid.delta),
            EstimandKind::Quantile => self.quantile_bounds_at(x, &grid.alpha),
        }
    }
}

impl CondNuisance for GroundTruth {
    fn dim(&self) -> usize {
        2
    }

    fn propensity(&self, x: &[f64]) -> f64 {
        clip_propensity(true_propensity(x), self.clip_floor)
    }

    fn cdf_grid(&self, arm: u8, x: &[f64], ys: &[f64]) -> Vec<f64> {
        ys.iter().map(|&y| self.cond_cdf(arm, x, y)).collect()
    }

    fn density(&self, arm: u8, x: &[f64], y: f64) -> f64 {
        self.cond_density(arm, x, y)
    }
}

// ---------------------------------------------------------------------------
// Coupling oracle
// ---------------------------------------------------------------------------

/// Exact range of `P(Y1 - Y0 <= delta)` over all couplings of two small
/// discrete marginals, by enumerating the basic feasible solutions of the
/// transportation polytope (spanning trees of the bipartite support graph);
/// a linear objective attains its optimum at such a vertex.
// row and column indices double as bit positions in the edge mask, so the
// range loops stay
#[allow(clippy::needless_range_loop)]
pub fn coupling_oracle(d1: &DiscreteDist, d0: &DiscreteDist, delta: f64) -> Result<(f64, f64)> {
    if !delta.is_finite() {
        return Err(Error::Domain(format!(
            "effect value {delta} must be finite"
        )));
    }
    let (s1, p1) = (d1.support(), d1.probs());
    let (s0, p0) = (d0.support(), d0.probs());
    let (m, n) = (s1.len(), s0.len());
    if m > 4 || n > 4 {
        return Err(Error::Domain(format!(
            "coupling oracle supports at most 4 atoms per marginal, got {m} x {n}"
        )));
    }
    let edges = m * n;
    let tree_edges = m + n - 1;
    let mut best_min = f64::INFINITY;
    let mut best_max = f64::NEG_INFINITY;
    'mask: for mask in 1u32..(1u32 << edges) {
        if mask.count_ones() as usize != tree_edges {
            continue;
        }
        let mut rdeg = [0u32; 4];
        let mut cdeg = [0u32; 4];
        for r in 0..m {
            for c in 0..n {
                if mask & (1 << (r * n + c)) != 0 {
                    rdeg[r] += 1;
                    cdeg[c] += 1;
                }
            }
        }
        if rdeg[..m].contains(&0) || cdeg[..n].contains(&0) {
            continue;
        }
        // peel leaves; a tree always has one, so full consumption of the
        // mask certifies the edge set is a spanning tree
        let mut rrem = [0.0f64; 4];
        let mut crem = [0.0f64; 4];
        rrem[..m].copy_from_slice(p1);
        crem[..n].copy_from_slice(p0);
        let mut alive = mask;
        let mut flow = [0.0f64; 16];
        loop {
            let mut progressed = false;
            for r in 0..m {
                if rdeg[r] == 1 {
                    let c = (0..n).find(|&c| alive & (1 << (r * n + c)) != 0).unwrap();
                    let f = rrem[r];
                    flow[r * n + c] = f;
                    rrem[r] = 0.0;
                    crem[c] -= f;
                    alive &= !(1 << (r * n + c));
                    rdeg[r] = 0;
                    cdeg[c] -= 1;
                    progressed = true;
                    break;
                }
            }
            if !progressed {
                for c in 0..n {
                    if cdeg[c] == 1 {
                        let r = (0..m).find(|&r| alive & (1 << (r * n + c)) != 0).unwrap();
                        let f = crem[c];
                        flow[r * n + c] = f;
                        crem[c] = 0.0;
                        rrem[r] -= f;
                        alive &= !(1 << (r * n + c));
                        cdeg[c] = 0;
                        rdeg[r] -= 1;
                        progressed = true;
                        break;
                    }
                }
            }
            if !progressed {
                break;
            }
        }
        if alive != 0 {
            continue 'mask; // leftover cycle: not a tree basis
        }
        for v in rrem[..m].iter().chain(&crem[..n]) {
            if v.abs() > 1e-9 {
                continue 'mask;
            }
        }
        for f in &flow[..edges] {
            if *f < -1e-12 {
                continue 'mask; // infeasible basis, not a vertex
            }
        }
        let mut obj = 0.0;
        for r in 0..m {
            for c in 0..n {
                if s1[r] - s0[c] <= delta {
                    obj += flow[r * n + c].max(0.0);
                }
            }
        }
        best_min = best_min.min(obj);
        best_max = best_max.max(obj);
    }
    if !best_min.is_finite() {
        return Err(Error::Domain("no feasible coupling basis found".into()));
    }
    Ok((best_min, best_max))
}

/// Result of comparing the closed-form discrete bounds against the exact
/// coupling range on random instances.
#[derive(Debug, Clone, Serialize)]
pub struct SharpnessReport {
    pub instances: usize,
    pub max_gap: f64,
    pub passed: bool,
}

/// Tolerance for agreement between the discrete bound formulas and the
/// exact coupling optimum.
pub const SHARPNESS_TOL: f64 = 1e-9;

fn random_discrete(rng: &mut ChaCha8Rng) -> DiscreteDist {
    let m = rng.random_range(1..=4usize);
    let mut support: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
    support.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // enforce strict separation without changing the order
    for (i, s) in support.iter_mut().enumerate() {
        *s += i as f64 * 1e-3;
    }
    let probs: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = probs.iter().sum();
    DiscreteDist::new(support, probs.iter().map(|p| p / total).collect()).unwrap()
}

/// Check on random discrete instances that the closed-form bounds coincide
/// with the exact coupling minimum and maximum (pointwise sharpness).
pub fn sharpness_check(instances: usize, seed: u64) -> Result<SharpnessReport> {
    if instances == 0 {
        return Err(Error::Config(
            "sharpness check needs at least one instance".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_gap = 0.0f64;
    for _ in 0..instances {
        let d1 = random_discrete(&mut rng);
        let d0 = random_discrete(&mut rng);
        // δ exactly at a support difference half the time, to exercise ties
        let delta = if rng.random::<f64>() < 0.5 {
            let i = rng.random_range(0..d1.support().len());
            let j = rng.random_range(0..d0.support().len());
            d1.support()[i] - d0.support()[j]
        } else {
            rng.random_range(-4.0..4.0)
        };
        let (lo, up) = cdf_bounds_mixed(&d1, &d0, delta)?;
        let (cmin, cmax) = coupling_oracle(&d1, &d0, delta)?;
        max_gap = max_gap.max((lo - cmin).abs()).max((up - cmax).abs());
    }
    Ok(SharpnessReport {
        instances,
        max_gap,
        passed: max_gap <= SHARPNESS_TOL,
    })
}

// ---------------------------------------------------------------------------
// Monte Carlo enclosure
// ---------------------------------------------------------------------------

/// Outcome of checking that explicit couplings stay inside the true bounds.
#[derive(Debug, Clone, Serialize)]
pub struct EnclosureReport {
    pub n_draws: usize,
    /// Smallest margin of `empirical - lower + 3 stderr` over all effect
    /// values and both couplings; negative means a violation.
    pub worst_lower_margin: f64,
    /// Smallest margin of `upper - empirical + 3 stderr`.
    pub worst_upper_margin: f64,
    pub passed: bool,
}

/// Draw the comonotone and antitone couplings of the two potential-outcome
/// laws at `x` and verify their effect CDFs lie within the true bounds at
/// every requested effect value, up to three binomial standard errors.
pub fn enclosure_check(
    setting: &SynthSetting,
    x: &[f64],
    deltas: &[f64],
    n_draws: usize,
) -> Result<EnclosureReport> {
    if n_draws < 100 {
        return Err(Error::BudgetTooSmall(format!(
            "{n_draws} draws; the enclosure check needs at least 100"
        )));
    }
    if deltas.is_empty() {
        return Err(Error::Config("enclosure check needs effect values".into()));
    }
    let truth = GroundTruth::new(setting.kind);
    // both couplings share the marginals: Y_a = Q_a(U) with U uniform,
    // against U and 1-U respectively
    let mut mono = Vec::with_capacity(n_draws);
    let mut anti = Vec::with_capacity(n_draws);
    let mut rng = ChaCha8Rng::seed_from_u64(setting.seed);
    for _ in 0..n_draws {
        let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
        let y1 = truth.cond_quantile(1, x, u)?;
        mono.push(y1 - truth.cond_quantile(0, x, u)?);
        anti.push(y1 - truth.cond_quantile(0, x, 1.0 - u)?);
    }
    mono.sort_by(|a, b| a.partial_cmp(b).unwrap());
    anti.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pair = truth.cdf_bounds_at(x, deltas)?;
    let nf = n_draws as f64;
    let mut worst_lo = f64::INFINITY;
    let mut worst_up = f64::INFINITY;
    for (j, &d) in deltas.iter().enumerate() {
        for draws in [&mono, &anti] {
            let emp = draws.partition_point(|v| *v <= d) as f64 / nf;
            let margin = 3.0 * (emp * (1.0 - emp) / nf).sqrt() + 1e-9;
            worst_lo = worst_lo.min(emp - pair.lower[j] + margin);
            worst_up = worst_up.min(pair.upper[j] - emp + margin);
        }
    }
    Ok(EnclosureReport {
        n_draws,
        worst_lower_margin: worst_lo,
        worst_upper_margin: worst_up,
        passed: worst_lo >= 0.0 && worst_up >= 0.0,
    })
}

// ---------------------------------------------------------------------------
// Orthogonality probe
// ---------------------------------------------------------------------------

const PHI_LO: f64 = -9.0;
const PHI_HI: f64 = 9.0;
const PHI_STEPS: usize = 18 * 1024;

/// Linear-interpolation table for the standard normal CDF; the dyadic step
/// keeps index arithmetic exact and the interpolation error below 1e-7.
struct PhiTable {
    vals: Vec<f64>,
}

impl PhiTable {
    fn build() -> Self {
        let step = (PHI_HI - PHI_LO) / PHI_STEPS as f64;
        let vals = (0..=PHI_STEPS)
            .map(|i| norm_cdf(PHI_LO + step * i as f64))
            .collect();
        Self { vals }
    }

    #[inline]
    fn eval(&self, z: f64) -> f64 {
        if z <= PHI_LO {
            return 0.0;
        }
        if z >= PHI_HI {
            return 1.0;
        }
        let t = (z - PHI_LO) * (PHI_STEPS as f64 / (PHI_HI - PHI_LO));
        let i = t as usize;
        let fr = t - i as f64;
        self.vals[i] + fr * (self.vals[i + 1] - self.vals[i])
    }
}

/// Minimum Monte Carlo budget for the probe.
pub const PROBE_MIN_BUDGET: usize = 10_000;

const PROBE_H: f64 = 0.04;
const PROBE_Y_LO: f64 = -40.0;
const PROBE_NY: usize = 2001;
/// Effect-value quadrature: 50 points from -7, step 8 grid cells so the
/// shifted CDF lookup stays on integer indices.
const PROBE_ND: usize = 50;
const PROBE_D0: f64 = -7.0;
const PROBE_DSTEP: f64 = 0.32;
const PROBE_DSHIFT0: isize = -175;
/// Scan half-width around the unperturbed optimizer, in grid cells.
const PROBE_WIN: isize = 75;
/// Size of the analytic nuisance distortion: the outcome location and the
/// propensity logit are both shifted by this much at `t = 1`.
const PROBE_SHIFT: f64 = 0.5;

/// Risk-gradient curves of the corrected (γ=1) and uncorrected (γ=0)
/// pseudo-outcome constructions under a common nuisance perturbation path,
/// with their fitted log-log slopes.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    /// Perturbation sizes; index 0 is the exact `t = 0` row.
    pub t_values: Vec<f64>,
    pub au_values: Vec<f64>,
    pub ca_values: Vec<f64>,
    pub au_slope: f64,
    pub ca_slope: f64,
    pub n_draws: usize,
}

fn refine_offset(fm: f64, f0: f64, fp: f64) -> f64 {
    let den = fm - 2.0 * f0 + fp;
    if den.abs() < 1e-18 {
        return 0.0;
    }
    (0.5 * (fm - fp) / den).clamp(-1.0, 1.0)
}

/// Perturbed arm CDFs at the parabola-refined optimizer, evaluated exactly.
#[allow(clippy::too_many_arguments)]
fn refine_eval(
    j: isize,
    lo: isize,
    hi: isize,
    k: isize,
    f1t: &[f64],
    f0t: &[f64],
    mu1: f64,
    mu0: f64,
    t: f64,
    delta: f64,
) -> (f64, f64, f64) {
    let off = if j > lo && j < hi {
        let at = |i: isize| f1t[i as usize] - f0t[(i - k) as usize];
        refine_offset(at(j - 1), at(j), at(j + 1))
    } else {
        0.0
    };
    let y = PROBE_Y_LO + PROBE_H * (j as f64 + off);
    let mix = |mu: f64, z: f64| (1.0 - t) * norm_cdf(z - mu) + t * norm_cdf(z - mu - PROBE_SHIFT);
    (y, mix(mu1, y), mix(mu0, y - delta))
}

/// Measure how fast the population risk of each pseudo-outcome
/// construction degrades as the nuisances are misspecified.
///
/// The perturbation path mixes each conditional outcome CDF with its copy
/// shifted by +0.5 and moves the propensity logit by +0.5·t. For each `t`
/// the probe averages, over draws of the covariates, the inner product of
/// the pseudo-outcome conditional-mean shift with the risk gradient at the
/// true bounds; first-order insensitivity shows up as a log-log slope near
/// 2, a plain plug-in construction near 1. Expectations over treatment and
/// outcome are taken in closed form so only the covariates are sampled.
pub fn orthogonality_probe(
    setting: &SynthSetting,
    t_values: &[f64],
    budget: usize,
) -> Result<ProbeReport> {
    if setting.kind != SettingKind::Normal {
        return Err(Error::Config(
            "the orthogonality probe is defined for the normal setting only".into(),
        ));
    }
    if budget < PROBE_MIN_BUDGET {
        return Err(Error::BudgetTooSmall(format!(
            "{budget} draws; the probe needs at least {PROBE_MIN_BUDGET}"
        )));
    }
    if t_values.len() < 2 {
        return Err(Error::Config("need at least two perturbation sizes".into()));
    }
    for w in t_values.windows(2) {
        if w[1] >= w[0] {
            return Err(Error::Config(
                "perturbation sizes must be decreasing".into(),
            ));
        }
    }
    if t_values
        .iter()
        .any(|t| !t.is_finite() || *t <= 0.0 || *t > 1.0)
    {
        return Err(Error::Config(
            "perturbation sizes must lie in (0, 1]".into(),
        ));
    }
    let table = PhiTable::build();
    let nt = t_values.len();
    let clip = DEFAULT_CLIP_FLOOR;
    let mut acc_au = vec![0.0f64; nt];
    let mut acc_ca = vec![0.0f64; nt];
    let mut f1t = vec![0.0f64; PROBE_NY];
    let mut f0t = vec![0.0f64; PROBE_NY];
    let mut pi0_low = [0.0f64; PROBE_ND];
    let mut pi0_up = [0.0f64; PROBE_ND];
    let mut rng = ChaCha8Rng::seed_from_u64(setting.seed);
    for _ in 0..budget {
        let x1 = rng.random_range(-2.0..2.0);
        let x2: f64 = rng.sample(StandardNormal);
        let x = [x1, x2];
        let mu1 = conditional_mean(1, &x);
        let mu0 = conditional_mean(0, &x);
        let tau = mu1 - mu0;
        let logit = 0.75 * x1 - x2 + 0.5;
        let pi = sigmoid(logit);
        let pi_tilde = sigmoid(logit + PROBE_SHIFT);
        for jd in 0..PROBE_ND {
            let delta = PROBE_D0 + PROBE_DSTEP * jd as f64;
            let s = 2.0 * norm_cdf((delta - tau) / 2.0) - 1.0;
            pi0_low[jd] = s.max(0.0);
            pi0_up[jd] = (1.0 + s.min(0.0)).min(1.0);
        }
        let ybar = 0.5 * (mu1 + mu0);
        let fill_lo = ((((ybar - 8.4 - PROBE_Y_LO) / PROBE_H).floor() as isize)
            .clamp(0, PROBE_NY as isize - 1)) as usize;
        let fill_hi = ((((ybar + 8.4 - PROBE_Y_LO) / PROBE_H).ceil() as isize)
            .clamp(0, PROBE_NY as isize - 1)) as usize;
        for (ti, &t) in t_values.iter().enumerate() {
            let pi_t = clip_propensity((1.0 - t) * pi + t * pi_tilde, clip);
            for j in fill_lo..=fill_hi {
                let y = PROBE_Y_LO + PROBE_H * j as f64;
                f1t[j] = (1.0 - t) * table.eval(y - mu1) + t * table.eval(y - mu1 - PROBE_SHIFT);
                f0t[j] = (1.0 - t) * table.eval(y - mu0) + t * table.eval(y - mu0 - PROBE_SHIFT);
            }
            let mut s_au = 0.0;
            let mut s_ca = 0.0;
            for jd in 0..PROBE_ND {
                let delta = PROBE_D0 + PROBE_DSTEP * jd as f64;
                let k = PROBE_DSHIFT0 + 8 * jd as isize;
                let jc = (((mu1 + mu0 + delta) * 0.5 - PROBE_Y_LO) / PROBE_H).round() as isize;
                let lo = (jc - PROBE_WIN)
                    .max(fill_lo as isize)
                    .max(fill_lo as isize + k);
                let hi = (jc + PROBE_WIN)
                    .min(fill_hi as isize)
                    .min(fill_hi as isize + k);
                // the distant tails contribute objective 0 on both sides
                let mut bmax = 0.0f64;
                let mut bmin = 0.0f64;
                let mut jmax = isize::MIN;
                let mut jmin = isize::MIN;
                let mut j = lo;
                while j <= hi {
                    let v = f1t[j as usize] - f0t[(j - k) as usize];
                    if v > bmax {
                        bmax = v;
                        jmax = j;
                    }
                    if v < bmin {
                        bmin = v;
                        jmin = j;
                    }
                    j += 1;
                }
                let mut dlow = -pi0_low[jd];
                let mut ec_low = 0.0;
                if jmax != isize::MIN {
                    let (ys, f1s, f0s) =
                        refine_eval(jmax, lo, hi, k, &f1t, &f0t, mu1, mu0, t, delta);
                    let sup = f1s - f0s;
                    if sup > 0.0 {
                        dlow = sup.min(1.0) - pi0_low[jd];
                        ec_low = (pi / pi_t) * (norm_cdf(ys - mu1) - f1s)
                            - ((1.0 - pi) / (1.0 - pi_t)) * (norm_cdf(ys - delta - mu0) - f0s);
                    }
                }
                let w_low = 1.0 - pi0_low[jd];
                s_ca += dlow * w_low;
                s_au += (dlow + ec_low) * w_low;
                let mut dup = 1.0 - pi0_up[jd];
                let mut ec_up = 0.0;
                if jmin != isize::MIN {
                    let (ys, f1s, f0s) =
                        refine_eval(jmin, lo, hi, k, &f1t, &f0t, mu1, mu0, t, delta);
                    let inf = f1s - f0s;
                    if inf < 0.0 {
                        dup = (1.0 + inf).max(0.0) - pi0_up[jd];
                        ec_up = (pi / pi_t) * (norm_cdf(ys - mu1) - f1s)
                            - ((1.0 - pi) / (1.0 - pi_t)) * (norm_cdf(ys - delta - mu0) - f0s);
                    }
                }
                let w_up = -pi0_up[jd];
                s_ca += dup * w_up;
                s_au += (dup + ec_up) * w_up;
            }
            acc_au[ti] += s_au;
            acc_ca[ti] += s_ca;
        }
    }
    let norm = -2.0 * PROBE_DSTEP / budget as f64;
    let mut ts = Vec::with_capacity(nt + 1);
    let mut au = Vec::with_capacity(nt + 1);
    let mut ca = Vec::with_capacity(nt + 1);
    // the t = 0 row is exact: the perturbation vanishes identically
    ts.push(0.0);
    au.push(0.0);
    ca.push(0.0);
    ts.extend_from_slice(t_values);
    au.extend(acc_au.iter().map(|v| v * norm));
    ca.extend(acc_ca.iter().map(|v| v * norm));
    let au_slope = loglog_slope(t_values, &au[1..]);
    let ca_slope = loglog_slope(t_values, &ca[1..]);
    Ok(ProbeReport {
        t_values: ts,
        au_values: au,
        ca_values: ca,
        au_slope,
        ca_slope,
        n_draws: budget,
    })
}

/// Least-squares slope of `log |value|` against `log t`.
fn loglog_slope(ts: &[f64], vals: &[f64]) -> f64 {
    let n = ts.len() as f64;
    let xs: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
    let ys: Vec<f64> = vals.iter().map(|v| v.abs().max(1e-300).ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Distances between one side of the predicted and true bounds.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SideMetrics {
    /// Root mean integrated squared CDF difference.
    pub rcrps: f64,
    /// Root mean integrated squared quantile difference.
    pub w2: f64,
}

/// Metrics for both bound sides.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PairMetrics {
    pub lower: SideMetrics,
    pub upper: SideMetrics,
}

fn invert_curve(grid: &[f64], curve: &[f64], levels: &[f64]) -> Result<Vec<f64>> {
    let cdf = GridCdf::new(grid.to_vec(), project_to_cdf(curve))?;
    levels
        .iter()
        .map(|&a| cdf.invert(a).map(|(v, _)| v))
        .collect()
}

/// Score predicted bounds against the truth over an evaluation set.
///
/// CDF-estimand curves are compared directly for the CRPS metric and
/// through their generalized inverses on the level grid for the quantile
/// metric; quantile-estimand curves the other way round. Monotone
/// projection is applied before inverting so that tiny numeric wobble in
/// otherwise valid curves cannot fail the conversion.
pub fn evaluate(
    preds: &[BoundsPair],
    truths: &[BoundsPair],
    grid: &EvalGrid,
) -> Result<PairMetrics> {
    if preds.is_empty() {
        return Err(Error::InvalidData("empty evaluation set".into()));
    }
    if preds.len() != truths.len() {
        return Err(Error::InvalidData(format!(
            "{} predictions against {} truths",
            preds.len(),
            truths.len()
        )));
    }
    let kind = preds[0].kind;
    let mut crps = [0.0f64; 2];
    let mut w2 = [0.0f64; 2];
    for (p, t) in preds.iter().zip(truths) {
        if p.kind != kind || t.kind != kind || p.grid != preds[0].grid || t.grid != p.grid {
            return Err(Error::InvalidData(
                "evaluation pairs disagree on estimand or grid".into(),
            ));
        }
        for (side, (pc, tc)) in [(&p.lower, &t.lower), (&p.upper, &t.upper)]
            .into_iter()
            .enumerate()
        {
            match kind {
                EstimandKind::Cdf => {
                    crps[side] += crps_distance(pc, tc, &p.grid)?;
                    let qp = invert_curve(&p.grid, pc, &grid.alpha)?;
                    let qt = invert_curve(&t.grid, tc, &grid.alpha)?;
                    w2[side] += w2_sq_distance(&qp, &qt, &grid.alpha)?;
                }
                EstimandKind::Quantile => {
                    w2[side] += w2_sq_distance(pc, tc, &p.grid)?;
                    let cp = GridQuantile::new(p.grid.clone(), project_to_quantile(pc))?
                        .to_cdf(&grid.y)?;
                    let ct = GridQuantile::new(t.grid.clone(), project_to_quantile(tc))?
                        .to_cdf(&grid.y)?;
                    crps[side] += crps_distance(cp.probs(), ct.probs(), &grid.y)?;
                }
            }
        }
    }
    let nf = preds.len() as f64;
    let side = |i: usize| SideMetrics {
        rcrps: (crps[i] / nf).sqrt(),
        w2: (w2[i] / nf).sqrt(),
    };
    Ok(PairMetrics {
        lower: side(0),
        upper: side(1),
    })
}

// ---------------------------------------------------------------------------
// Benchmark driver
// ---------------------------------------------------------------------------

/// The held-out set reuses the training seed through this fixed mask so a
/// single seed fully determines a benchmark run.
pub const TEST_SEED_XOR: u64 = 0x9E37_79B9_7F4A_7C15;

/// One metrics line: a (learner, bound side) cell of a benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub n_train: usize,
    pub learner: String,
    pub side: String,
    pub estimand: String,
    pub rcrps_in: f64,
    pub rcrps_out: f64,
    pub w2_in: f64,
    pub w2_out: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

/// Configuration of a single-seed benchmark run.
#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub setting: SynthSetting,
    pub n_train: usize,
    pub n_test: usize,
    pub learners: Vec<LearnerKind>,
    pub estimand: EstimandKind,
    pub loss: LossKind,
    /// Correction scale for the AU-learner; `None` takes the loss default.
    pub gamma: Option<f64>,
    pub k_folds: usize,
    pub cdf_method: CdfMethod,
    /// Replace fitted nuisances by the exact ones (plugin/ca/au only).
    pub oracle_nuisance: bool,
    pub clip_floor: f64,
    pub n_delta: usize,
    pub n_alpha: usize,
    pub n_y: usize,
}

impl BenchmarkConfig {
    pub fn new(setting: SynthSetting, n_train: usize) -> Self {
        Self {
            setting,
            n_train,
            n_test: 1000,
            learners: vec![
                LearnerKind::Plugin,
                LearnerKind::Iptw,
                LearnerKind::Ca,
                LearnerKind::Au,
            ],
            estimand: EstimandKind::Cdf,
            loss: LossKind::Crps,
            gamma: None,
            k_folds: 1,
            cdf_method: CdfMethod::default(),
            oracle_nuisance: false,
            clip_floor: DEFAULT_CLIP_FLOOR,
            n_delta: 50,
            n_alpha: 50,
            n_y: 200,
        }
    }
}

fn canonical_learners(requested: &[LearnerKind]) -> Vec<LearnerKind> {
    [
        LearnerKind::Plugin,
        LearnerKind::Iptw,
        LearnerKind::Ca,
        LearnerKind::Au,
    ]
    .into_iter()
    .filter(|k| requested.contains(k))
    .collect()
}

fn learner_config(cfg: &BenchmarkConfig, lk: LearnerKind, grid: &EvalGrid) -> LearnerConfig {
    let mut lc = LearnerConfig::new(lk, cfg.estimand, cfg.loss, grid.clone());
    lc.k_folds = cfg.k_folds;
    lc.clip_floor = cfg.clip_floor;
    lc.cdf_method = cfg.cdf_method;
    if lk == LearnerKind::Au {
        if let Some(g) = cfg.gamma {
            lc.gamma = g;
        }
    }
    lc
}

fn all_bounds<F>(rows: usize, mut f: F) -> Result<Vec<BoundsPair>>
where
    F: FnMut(usize) -> Result<BoundsPair>,
{
    (0..rows).map(&mut f).collect()
}

fn oracle_predictions(
    train: &Dataset,
    test: &Dataset,
    grid: &EvalGrid,
    cfg: &BenchmarkConfig,
    lk: LearnerKind,
    truth: &GroundTruth,
) -> Result<(Vec<BoundsPair>, Vec<BoundsPair>)> {
    match lk {
        LearnerKind::Iptw => Err(Error::Config(
            "the iptw learner has no oracle-nuisance form; its weights come from fitted propensities"
                .into(),
        )),
        LearnerKind::Plugin => {
            let f = |d: &Dataset| {
                all_bounds(d.n(), |i| plugin_bounds(truth, d.x_row(i), grid, cfg.estimand))
            };
            Ok((f(train)?, f(test)?))
        }
        LearnerKind::Ca | LearnerKind::Au => {
            let mut lc = learner_config(cfg, lk, grid);
            lc.k_folds = 1;
            let envs: Vec<&dyn CondNuisance> = vec![truth; train.n()];
            let (lo, up) = pseudo_surface_with(train, &envs, &lc)?;
            let wl = fit_second_stage(&lo, train, &lc)?;
            let wu = fit_second_stage(&up, train, &lc)?;
            let f = |d: &Dataset| {
                all_bounds(d.n(), |i| predict_bounds(&wl, &wu, d.x_row(i)).map(|(p, _)| p))
            };
            Ok((f(train)?, f(test)?))
        }
    }
}

fn fitted_predictions(
    train: &Dataset,
    test: &Dataset,
    grid: &EvalGrid,
    cfg: &BenchmarkConfig,
    lk: LearnerKind,
) -> Result<(Vec<BoundsPair>, Vec<BoundsPair>)> {
    let lc = learner_config(cfg, lk, grid);
    let trained = train_learner(train, &lc)?;
    let f = |d: &Dataset| all_bounds(d.n(), |i| trained.predict(d.x_row(i)).map(|(p, _)| p));
    Ok((f(train)?, f(test)?))
}

/// Run every requested learner on one synthetic draw and score it against
/// the ground truth, in and out of sample. Rows come out in canonical
/// learner-then-side order and are bit-reproducible for a fixed config.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<MetricsReport> {
    if cfg.n_train == 0 || cfg.n_test == 0 {
        return Err(Error::Config(
            "benchmark needs nonempty train and test sets".into(),
        ));
    }
    if cfg.learners.is_empty() {
        return Err(Error::Config("benchmark needs at least one learner".into()));
    }
    let train = generate_synth(&cfg.setting, cfg.n_train)?;
    let test_setting = SynthSetting::new(cfg.setting.kind, cfg.setting.seed ^ TEST_SEED_XOR);
    let test = generate_synth(&test_setting, cfg.n_test)?;
    let grid = EvalGrid::from_outcomes(
        &train.arm_outcomes(1),
        &train.arm_outcomes(0),
        cfg.n_delta,
        cfg.n_alpha,
        cfg.n_y,
    )?;
    let truth = GroundTruth::new(cfg.setting.kind).with_clip_floor(cfg.clip_floor);
    let truths_in = all_bounds(train.n(), |i| {
        truth.true_bounds(train.x_row(i), &grid, cfg.estimand)
    })?;
    let truths_out = all_bounds(test.n(), |i| {
        truth.true_bounds(test.x_row(i), &grid, cfg.estimand)
    })?;
    let mut rows = Vec::new();
    for lk in canonical_learners(&cfg.learners) {
        let (preds_in, preds_out) = if cfg.oracle_nuisance {
            oracle_predictions(&train, &test, &grid, cfg, lk, &truth)?
        } else {
            fitted_predictions(&train, &test, &grid, cfg, lk)?
        };
        let m_in = evaluate(&preds_in, &truths_in, &grid)?;
        let m_out = evaluate(&preds_out, &truths_out, &grid)?;
        for (side, sin, sout) in [
            ("lower", m_in.lower, m_out.lower),
            ("upper", m_in.upper, m_out.upper),
        ] {
            rows.push(MetricsRow {
                seed: cfg.setting.seed,
                n_train: cfg.n_train,
                learner: lk.to_string(),
                side: side.into(),
                estimand: cfg.estimand.to_string(),
                rcrps_in: sin.rcrps,
                rcrps_out: sout.rcrps,
                w2_in: sin.w2,
                w2_out: sout.w2,
            });
        }
    }
    Ok(MetricsReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::fit_propensity;
    use crate::stats::mean;

    #[test]
    fn frozen_mechanism_values() {
        assert!((true_propensity(&[2.0, 0.0]) - 0.8808).abs() < 5e-5);
        assert!((conditional_mean(1, &[1.0, 0.0]) - 0.1814).abs() < 5e-5);
        assert!((conditional_mean(0, &[1.0, 0.0]) - (-2.8186)).abs() < 5e-5);
    }

    #[test]
    fn covariate_and_treatment_moments_match_design() {
        let n = 100_000;
        let data = generate_synth(&SynthSetting::new(SettingKind::Normal, 11), n).unwrap();
        let x1: Vec<f64> = (0..n).map(|i| data.x_row(i)[0]).collect();
        let x2: Vec<f64> = (0..n).map(|i| data.x_row(i)[1]).collect();
        let nf = n as f64;
        // Unif(-2, 2) has sd 2/sqrt(3)
        assert!(mean(&x1).abs() < 3.0 * (2.0 / 3f64.sqrt()) / nf.sqrt());
        assert!(mean(&x2).abs() < 3.0 / nf.sqrt());
        let treated = data.a().iter().map(|&a| f64::from(a)).sum::<f64>() / nf;
        let pbar = (0..n).map(|i| true_propensity(data.x_row(i))).sum::<f64>() / nf;
        // A - p(X) is centered with variance at most 1/4
        assert!((treated - pbar).abs() < 3.0 * 0.5 / nf.sqrt());
    }

    #[test]
    fn propensity_fit_recovers_generator_coefficients() {
        let data = generate_synth(&SynthSetting::new(SettingKind::Normal, 3), 5000).unwrap();
        let model = fit_propensity(&data, 1e-4).unwrap();
        let target = [0.5, 0.75, -1.0];
        for (w, t) in model.weights.iter().zip(target) {
            assert!((w - t).abs() < 0.15, "weight {w} far from {t}");
        }
    }

    #[test]
    fn generation_is_deterministic_with_stable_prefixes() {
        let s = SynthSetting::new(SettingKind::Exponential, 7);
        let a = generate_synth(&s, 50).unwrap();
        let b = generate_synth(&s, 50).unwrap();
        let c = generate_synth(&s, 30).unwrap();
        assert_eq!(a.y(), b.y());
        assert_eq!(&a.y()[..30], c.y());
        assert_eq!(&a.a()[..30], c.a());
        let other = generate_synth(&SynthSetting::new(SettingKind::Exponential, 8), 50).unwrap();
        assert_ne!(a.y(), other.y());
    }

    #[test]
    fn exponential_outcomes_positive_with_matching_means() {
        let s = SynthSetting::new(SettingKind::Exponential, 5);
        let data = generate_synth(&s, 40_000).unwrap();
        assert!(data.y().iter().all(|y| *y >= 0.0));
        let truth = GroundTruth::new(SettingKind::Exponential);
        let mut err = 0.0;
        let mut n_used = 0.0;
        for i in 0..data.n() {
            err += data.y()[i] - truth.cond_mean(data.a()[i], data.x_row(i));
            n_used += 1.0;
        }
        // residuals have sd equal to the conditional mean, bounded by ~9
        assert!((err / n_used).abs() < 3.0 * 9.0 / n_used.sqrt());
    }

    #[test]
    fn normal_truth_matches_numeric_search() {
        let truth = GroundTruth::new(SettingKind::Normal);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let deltas = linspace(-6.0, 6.0, 25);
        let levels: Vec<f64> = (1..20).map(|j| f64::from(j) / 20.0).collect();
        for _ in 0..20 {
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5)];
            let mu1 = conditional_mean(1, &x);
            let mu0 = conditional_mean(0, &x);
            let analytic = truth.cdf_bounds_at(&x, &deltas).unwrap();
            let cand = truth.candidates(&x);
            let (numeric, _) =
                cdf_bounds_detailed(|y| norm_cdf(y - mu1), |y| norm_cdf(y - mu0), &deltas, &cand)
                    .unwrap();
            for j in 0..deltas.len() {
                assert!((analytic.lower[j] - numeric.lower[j]).abs() < 1e-3);
                assert!((analytic.upper[j] - numeric.upper[j]).abs() < 1e-3);
            }
            let analytic_q = truth.quantile_bounds_at(&x, &levels).unwrap();
            let q = |mu: f64| move |u: f64| mu + norm_quantile(u.clamp(1e-9, 1.0 - 1e-9));
            let fine: Vec<f64> = (1..2001).map(|j| f64::from(j) / 2001.0).collect();
            let (numeric_q, _) = quantile_bounds_detailed(q(mu1), q(mu0), &levels, &fine).unwrap();
            for j in 0..levels.len() {
                assert!((analytic_q.lower[j] - numeric_q.lower[j]).abs() < 1e-3);
                assert!((analytic_q.upper[j] - numeric_q.upper[j]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn multimodal_truth_is_valid_and_rejects_quantiles() {
        let truth = GroundTruth::new(SettingKind::Multimodal);
        let x = [0.8, -0.4];
        let deltas = linspace(-8.0, 8.0, 33);
        let pair = truth.cdf_bounds_at(&x, &deltas).unwrap();
        for j in 1..deltas.len() {
            assert!(pair.lower[j] >= pair.lower[j - 1] - 1e-12);
            assert!(pair.upper[j] >= pair.upper[j - 1] - 1e-12);
        }
        let err = truth
            .quantile_bounds_at(&x, &[0.25, 0.5, 0.75])
            .unwrap_err();
        assert!(matches!(err, Error::UnsupportedEstimand(_)));
    }

    #[test]
    fn exponential_truth_produces_valid_bounds_for_both_estimands() {
        let truth = GroundTruth::new(SettingKind::Exponential);
        let x = [1.2, 0.3];
        let deltas = linspace(-10.0, 10.0, 41);
        truth.cdf_bounds_at(&x, &deltas).unwrap();
        let levels = [0.1, 0.3, 0.5, 0.7, 0.9];
        let pair = truth.quantile_bounds_at(&x, &levels).unwrap();
        for j in 0..levels.len() {
            assert!(pair.lower[j] <= pair.upper[j]);
        }
    }

    #[test]
    fn coupling_point_masses() {
        let d1 = DiscreteDist::new(vec![2.0], vec![1.0]).unwrap();
        let d0 = DiscreteDist::new(vec![0.5], vec![1.0]).unwrap();
        assert_eq!(coupling_oracle(&d1, &d0, 1.0).unwrap(), (0.0, 0.0));
        assert_eq!(coupling_oracle(&d1, &d0, 1.5).unwrap(), (1.0, 1.0));
        assert_eq!(coupling_oracle(&d1, &d0, 2.0).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn coupling_bernoulli_range() {
        let d = DiscreteDist::new(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        let (lo, up) = coupling_oracle(&d, &d, -1.0).unwrap();
        assert!((lo - 0.0).abs() < 1e-12);
        assert!((up - 0.5).abs() < 1e-12);
    }

    #[test]
    fn coupling_rejects_large_supports() {
        let d5 = DiscreteDist::uniform_on(vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let d1 = DiscreteDist::new(vec![0.0], vec![1.0]).unwrap();
        assert!(coupling_oracle(&d5, &d1, 0.0).is_err());
    }

    #[test]
    fn discrete_bounds_are_sharp_against_the_coupling_oracle() {
        let report = sharpness_check(25, 99).unwrap();
        assert!(report.passed, "max gap {}", report.max_gap);
    }

    #[test]
    fn enclosure_holds_for_normal_and_exponential() {
        for (kind, x) in [
            (SettingKind::Normal, [0.7, -0.3]),
            (SettingKind::Exponential, [1.1, 0.4]),
        ] {
            let truth = GroundTruth::new(kind);
            let tau = truth.cond_mean(1, &x) - truth.cond_mean(0, &x);
            let deltas = linspace(tau - 6.0, tau + 6.0, 41);
            let report =
                enclosure_check(&SynthSetting::new(kind, 17), &x, &deltas, 20_000).unwrap();
            assert!(
                report.passed,
                "{kind}: margins {} / {}",
                report.worst_lower_margin, report.worst_upper_margin
            );
        }
    }

    #[test]
    fn enclosure_rejects_tiny_budgets() {
        let s = SynthSetting::new(SettingKind::Normal, 1);
        let err = enclosure_check(&s, &[0.0, 0.0], &[0.0, 1.0], 10).unwrap_err();
        assert!(matches!(err, Error::BudgetTooSmall(_)));
    }

    #[test]
    fn probe_validates_inputs() {
        let s = SynthSetting::new(SettingKind::Normal, 1);
        assert!(matches!(
            orthogonality_probe(&s, &[0.4, 0.1], 5000).unwrap_err(),
            Error::BudgetTooSmall(_)
        ));
        assert!(orthogonality_probe(&s, &[0.1, 0.4], 20_000).is_err());
        assert!(orthogonality_probe(&s, &[0.4], 20_000).is_err());
        let m = SynthSetting::new(SettingKind::Multimodal, 1);
        assert!(orthogonality_probe(&m, &[0.4, 0.1], 20_000).is_err());
    }

    #[test]
    fn probe_separates_corrected_from_uncorrected() {
        let s = SynthSetting::new(SettingKind::Normal, 2);
        let report = orthogonality_probe(&s, &[0.4, 0.2, 0.1], 10_000).unwrap();
        assert_eq!(report.t_values[0], 0.0);
        assert_eq!(report.au_values[0], 0.0);
        assert_eq!(report.ca_values[0], 0.0);
        assert!(report
            .au_values
            .iter()
            .chain(&report.ca_values)
            .all(|v| v.is_finite()));
        assert!(
            report.au_slope > 1.5 && report.ca_slope < 1.2,
            "slopes {} / {}",
            report.au_slope,
            report.ca_slope
        );
    }

    #[test]
    fn evaluate_is_zero_on_itself_and_scales_with_shifts() {
        let truth = GroundTruth::new(SettingKind::Normal);
        let grid = EvalGrid::regular((-4.0, 4.0), 33, 19, (-6.0, 6.0), 101).unwrap();
        let xs = [[0.3, 0.1], [-0.5, 0.6], [1.0, -0.2]];
        let truths: Vec<BoundsPair> = xs
            .iter()
            .map(|x| truth.true_bounds(x, &grid, EstimandKind::Cdf).unwrap())
            .collect();
        let zero = evaluate(&truths, &truths, &grid).unwrap();
        assert_eq!(zero.lower.rcrps, 0.0);
        assert_eq!(zero.upper.rcrps, 0.0);
        assert_eq!(zero.lower.w2, 0.0);
        assert_eq!(zero.upper.w2, 0.0);
        // shift both curves by 0.1 without hitting the [0, 1] clamp
        let shifted: Vec<BoundsPair> = truths
            .iter()
            .map(|p| {
                let bump = |v: &f64| (v + 0.1).min(1.0);
                BoundsPair::new(
                    p.kind,
                    p.grid.clone(),
                    p.lower.iter().map(bump).collect(),
                    p.upper.iter().map(bump).collect(),
                )
                .unwrap()
            })
            .collect();
        let m = evaluate(&shifted, &truths, &grid).unwrap();
        let span = grid.delta[grid.delta.len() - 1] - grid.delta[0];
        assert!(m.lower.rcrps <= 0.1 * span.sqrt() + 1e-9);
        assert!(m.upper.rcrps <= 0.1 * span.sqrt() + 1e-9);
    }

    #[test]
    fn evaluate_rejects_empty_and_mismatched_sets() {
        let grid = EvalGrid::regular((-1.0, 1.0), 5, 3, (-2.0, 2.0), 9).unwrap();
        assert!(evaluate(&[], &[], &grid).is_err());
        let truth = GroundTruth::new(SettingKind::Normal);
        let pair = truth
            .true_bounds(&[0.0, 0.0], &grid, EstimandKind::Cdf)
            .unwrap();
        assert!(evaluate(&[pair], &[], &grid).is_err());
    }

    fn quick_benchmark() -> BenchmarkConfig {
        let mut cfg = BenchmarkConfig::new(SynthSetting::new(SettingKind::Normal, 41), 150);
        cfg.n_test = 60;
        cfg.learners = vec![LearnerKind::Ca, LearnerKind::Plugin];
        cfg.cdf_method = CdfMethod::GaussianLocScale;
        cfg.n_delta = 20;
        cfg.n_alpha = 10;
        cfg.n_y = 60;
        cfg
    }

    #[test]
    fn benchmark_rows_are_canonical_and_reproducible() {
        let cfg = quick_benchmark();
        let a = run_benchmark(&cfg).unwrap();
        let b = run_benchmark(&cfg).unwrap();
        assert_eq!(a, b);
        let names: Vec<(String, String)> = a
            .rows
            .iter()
            .map(|r| (r.learner.clone(), r.side.clone()))
            .collect();
        let want: Vec<(String, String)> = [
            ("plugin", "lower"),
            ("plugin", "upper"),
            ("ca", "lower"),
            ("ca", "upper"),
        ]
        .iter()
        .map(|(l, s)| (l.to_string(), s.to_string()))
        .collect();
        assert_eq!(names, want);
        for r in &a.rows {
            for v in [r.rcrps_in, r.rcrps_out, r.w2_in, r.w2_out] {
                assert!(v.is_finite() && v >= 0.0);
            }
        }
    }

    #[test]
    fn benchmark_oracle_mode_runs_and_rejects_iptw() {
        let mut cfg = quick_benchmark();
        cfg.oracle_nuisance = true;
        cfg.learners = vec![LearnerKind::Plugin, LearnerKind::Au];
        let report = run_benchmark(&cfg).unwrap();
        assert_eq!(report.rows.len(), 4);
        cfg.learners = vec![LearnerKind::Iptw];
        assert!(run_benchmark(&cfg).is_err());
    }

    #[test]
    fn benchmark_quantile_estimand_runs() {
        let mut cfg = quick_benchmark();
        cfg.estimand = EstimandKind::Quantile;
        cfg.loss = LossKind::W2Sq;
        let report = run_benchmark(&cfg).unwrap();
        assert!(report.rows.iter().all(|r| r.estimand == "quantile"));
        assert!(report
            .rows
            .iter()
            .all(|r| r.w2_in.is_finite() && r.w2_out.is_finite()));
    }
}
