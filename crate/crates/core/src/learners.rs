//! The learner hierarchy for covariate-conditional treatment-effect
//! bounds: plug-in evaluation of the Makarov formulas at fitted nuisances,
//! an inverse-propensity reweighted variant, and two pseudo-outcome
//! learners (CA and AU) that regress per-row bound surrogates on
//! covariates with a projected second-stage working model.
//!
//! The AU pseudo-outcome adds a scaled one-step correction to the plug-in
//! value; at `gamma = 0` it reduces exactly to the CA pseudo-outcome,
//! which is the plug-in bound itself.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::grid::{project_to_cdf, project_to_quantile, EvalGrid, GridCdf};
use crate::makarov::{
    inf_convolution, quantile_lower_inverse, quantile_upper_inverse, sup_convolution, BoundsPair,
    EstimandKind,
};
use crate::nuisance::{
    fit_cond_cdf_weighted, CdfMethod, CondCdfModel, CrossFitPlan, FoldModels, NuisanceConfig,
    NuisanceFit, DEFAULT_CLIP_FLOOR, DEFAULT_PROPENSITY_L2, DENSITY_FLOOR,
};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Which estimation strategy produces the final bound surfaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerKind {
    Plugin,
    Iptw,
    Ca,
    Au,
}

impl std::fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LearnerKind::Plugin => "plugin",
            LearnerKind::Iptw => "iptw",
            LearnerKind::Ca => "ca",
            LearnerKind::Au => "au",
        })
    }
}

impl std::str::FromStr for LearnerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plugin" => Ok(LearnerKind::Plugin),
            "iptw" => Ok(LearnerKind::Iptw),
            "ca" => Ok(LearnerKind::Ca),
            "au" => Ok(LearnerKind::Au),
            other => Err(Error::Config(format!(
                "unknown learner '{other}' (expected plugin, iptw, ca, or au)"
            ))),
        }
    }
}

/// Second-stage loss: integrated squared CDF distance or squared
/// quantile (Wasserstein-2) distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Crps,
    W2Sq,
}

impl LossKind {
    /// Default correction scale for the AU-learner under this loss.
    pub fn default_gamma(self) -> f64 {
        match self {
            LossKind::Crps => 0.25,
            LossKind::W2Sq => 0.01,
        }
    }

    /// The estimand whose grid this loss integrates over.
    pub fn natural_estimand(self) -> EstimandKind {
        match self {
            LossKind::Crps => EstimandKind::Cdf,
            LossKind::W2Sq => EstimandKind::Quantile,
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Crps => "crps",
            LossKind::W2Sq => "w2sq",
        })
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crps" => Ok(LossKind::Crps),
            "w2sq" => Ok(LossKind::W2Sq),
            other => Err(Error::Config(format!(
                "unknown loss '{other}' (expected crps or w2sq)"
            ))),
        }
    }
}

/// Which of the two bound curves a surface or model refers to. For the
/// quantile estimand, `Lower` is the lower endpoint of the identified
/// interval (the inverse of the upper CDF bound) and `Upper` the inverse
/// of the lower CDF bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundSide {
    Lower,
    Upper,
}

impl std::fmt::Display for BoundSide {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BoundSide::Lower => "lower",
            BoundSide::Upper => "upper",
        })
    }
}

/// Everything a learner run needs beyond the data.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerConfig {
    pub learner: LearnerKind,
    pub estimand: EstimandKind,
    pub loss: LossKind,
    /// Correction scale in [0, 1]; forced to 0 for the CA-learner and
    /// irrelevant for plugin/iptw.
    pub gamma: f64,
    pub k_folds: usize,
    pub eval_grid: EvalGrid,
    pub clip_floor: f64,
    /// Ridge penalty of the second-stage per-grid-point regressions.
    pub ridge: f64,
    pub cdf_method: CdfMethod,
    pub propensity_l2: f64,
}

impl LearnerConfig {
    /// Defaults: gamma per loss for the AU-learner (0 otherwise),
    /// same-data mode (one fold), clip floor 0.05, ridge 1e-3, kernel
    /// conditional CDFs.
    pub fn new(
        learner: LearnerKind,
        estimand: EstimandKind,
        loss: LossKind,
        eval_grid: EvalGrid,
    ) -> Self {
        let gamma = if learner == LearnerKind::Au {
            loss.default_gamma()
        } else {
            0.0
        };
        Self {
            learner,
            estimand,
            loss,
            gamma,
            k_folds: 1,
            eval_grid,
            clip_floor: DEFAULT_CLIP_FLOOR,
            ridge: 1e-3,
            cdf_method: CdfMethod::default(),
            propensity_l2: DEFAULT_PROPENSITY_L2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma {} outside [0, 1]",
                self.gamma
            )));
        }
        if self.k_folds == 0 {
            return Err(Error::Config("fold count must be at least 1".into()));
        }
        if !(self.clip_floor > 0.0 && self.clip_floor < 0.5) {
            return Err(Error::Config(format!(
                "clip floor {} outside (0, 0.5)",
                self.clip_floor
            )));
        }
        if self.ridge.is_nan() || self.ridge < 0.0 {
            return Err(Error::Config(format!(
                "ridge {} must be nonnegative",
                self.ridge
            )));
        }
        Ok(())
    }

    /// The correction scale actually applied when building pseudo-outcome
    /// surfaces: 0 for every learner except AU.
    pub fn effective_gamma(&self) -> f64 {
        match self.learner {
            LearnerKind::Au => self.gamma,
            _ => 0.0,
        }
    }

    pub fn nuisance_config(&self) -> NuisanceConfig {
        NuisanceConfig {
            method: self.cdf_method,
            l2: self.propensity_l2,
            clip_floor: self.clip_floor,
        }
    }

    /// Grid the estimand's curves live on.
    pub fn grid_values(&self) -> &[f64] {
        match self.estimand {
            EstimandKind::Cdf => &self.eval_grid.delta,
            EstimandKind::Quantile => &self.eval_grid.alpha,
        }
    }
}

/// A conditional-nuisance view: clipped propensity plus per-arm outcome
/// CDFs and densities at a covariate value. Implemented by fitted fold
/// models and by the synthetic-benchmark oracles.
pub trait CondNuisance {
    fn dim(&self) -> usize;
    /// Propensity at `x`, already clipped away from 0 and 1.
    fn propensity(&self, x: &[f64]) -> f64;
    /// Conditional outcome CDF of `arm` at each of `ys`.
    fn cdf_grid(&self, arm: u8, x: &[f64], ys: &[f64]) -> Vec<f64>;
    /// Conditional outcome density of `arm` at `y`.
    fn density(&self, arm: u8, x: &[f64], y: f64) -> f64;
}

impl CondNuisance for FoldModels {
    fn dim(&self) -> usize {
        match &self.cdf1 {
            CondCdfModel::GaussianLocScale { mean_weights, .. } => mean_weights.len() - 1,
            CondCdfModel::KernelEmpirical { dim, .. } => *dim,
        }
    }

    fn propensity(&self, x: &[f64]) -> f64 {
        self.propensity.predict(x)
    }

    fn cdf_grid(&self, arm: u8, x: &[f64], ys: &[f64]) -> Vec<f64> {
        self.cdf_model(arm).cdf_grid(x, ys)
    }

    fn density(&self, arm: u8, x: &[f64], y: f64) -> f64 {
        self.cdf_model(arm).at(x).density(y)
    }
}

/// Fold-averaged nuisance view for covariates with no fold of their own
/// (prediction points outside the training set when K > 1).
pub struct PooledNuisance<'a> {
    folds: &'a [FoldModels],
}

impl NuisanceFit {
    /// Nuisance view for external prediction points: the single fit in
    /// same-data mode, otherwise the average over folds.
    pub fn pooled(&self) -> PooledNuisance<'_> {
        PooledNuisance { folds: &self.folds }
    }
}

impl CondNuisance for PooledNuisance<'_> {
    fn dim(&self) -> usize {
        self.folds[0].dim()
    }

    fn propensity(&self, x: &[f64]) -> f64 {
        let s: f64 = self.folds.iter().map(|f| f.propensity.predict(x)).sum();
        s / self.folds.len() as f64
    }

    fn cdf_grid(&self, arm: u8, x: &[f64], ys: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; ys.len()];
        for f in self.folds {
            for (a, v) in acc.iter_mut().zip(f.cdf_grid(arm, x, ys)) {
                *a += v;
            }
        }
        let k = self.folds.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        acc
    }

    fn density(&self, arm: u8, x: &[f64], y: f64) -> f64 {
        let s: f64 = self.folds.iter().map(|f| f.density(arm, x, y)).sum();
        s / self.folds.len() as f64
    }
}

/// Both arm CDFs tabulated on the outcome grid at one covariate value.
struct ArmTables {
    f1: GridCdf,
    f0: GridCdf,
}

fn tabulate_arms(env: &dyn CondNuisance, x: &[f64], ys: &[f64]) -> Result<ArmTables> {
    if x.len() != env.dim() {
        return Err(Error::InvalidData(format!(
            "covariate length {} does not match nuisance dimension {}",
            x.len(),
            env.dim()
        )));
    }
    let f1 = GridCdf::new(ys.to_vec(), env.cdf_grid(1, x, ys))?;
    let f0 = GridCdf::new(ys.to_vec(), env.cdf_grid(0, x, ys))?;
    Ok(ArmTables { f1, f0 })
}

/// Makarov bounds at one covariate value from a nuisance view, searching
/// the evaluation grid.
pub fn plugin_bounds(
    env: &dyn CondNuisance,
    x: &[f64],
    grid: &EvalGrid,
    kind: EstimandKind,
) -> Result<BoundsPair> {
    let rs = row_curves(env, x, grid, kind)?;
    BoundsPair::new(kind, rs.grid, rs.plugin_lower, rs.plugin_upper)
}

/// Per-arm kernel CDF models reweighted by inverse out-of-fold
/// propensities; feeding these into plug-in bound evaluation gives the
/// IPTW learner. Returns (arm-0 model, arm-1 model).
pub fn iptw_fit(
    data: &Dataset,
    plan: &CrossFitPlan,
    fit: &NuisanceFit,
    method: CdfMethod,
) -> Result<(CondCdfModel, CondCdfModel)> {
    let mut models = Vec::with_capacity(2);
    for arm in [0u8, 1u8] {
        let rows = data.arm_indices(arm);
        let weights: Vec<f64> = rows
            .iter()
            .map(|&i| {
                let p = fit.folds[plan.fold_of(i)].propensity.predict(data.x_row(i));
                if arm == 1 {
                    1.0 / p
                } else {
                    1.0 / (1.0 - p)
                }
            })
            .collect();
        models.push(fit_cond_cdf_weighted(data, arm, &weights, method)?);
    }
    let m1 = models.pop().unwrap();
    let m0 = models.pop().unwrap();
    Ok((m0, m1))
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// One-step correction for a CDF bound, assembled from its pieces:
/// treatment indicator `a`, outcome `y`, clipped propensity `pi`, the
/// optimizer `y_star` of the bound's convolution, the arm CDFs evaluated
/// there, and whether the bound's rectifier is active.
#[allow(clippy::too_many_arguments)]
pub fn cdf_correction_from_parts(
    a: u8,
    y: f64,
    pi: f64,
    delta: f64,
    y_star: f64,
    f1_star: f64,
    f0_star: f64,
    active: bool,
) -> f64 {
    if !active {
        return 0.0;
    }
    let a1 = a as f64;
    a1 / pi * (indicator(y <= y_star) - f1_star)
        - (1.0 - a1) / (1.0 - pi) * (indicator(y <= y_star - delta) - f0_star)
}

/// One-step correction for a quantile bound from its pieces. `u_star` is
/// the inner optimizer, `shift` its argument on the untreated side
/// (`u* - alpha` for the interval's upper endpoint, `u* - alpha + 1` for
/// the lower), `q1_at`/`q0_at` the arm quantiles at those levels, and
/// `dens1`/`dens0` the arm densities there (floored internally).
#[allow(clippy::too_many_arguments)]
pub fn quantile_correction_from_parts(
    a: u8,
    y: f64,
    pi: f64,
    u_star: f64,
    shift: f64,
    q1_at: f64,
    q0_at: f64,
    dens1: f64,
    dens0: f64,
) -> f64 {
    let a1 = a as f64;
    let d1 = dens1.max(DENSITY_FLOOR);
    let d0 = dens0.max(DENSITY_FLOOR);
    a1 / pi * ((indicator(y <= q1_at) - u_star) / d1)
        - (1.0 - a1) / (1.0 - pi) * ((indicator(y <= q0_at) - shift) / d0)
}

/// Plug-in bound values and one-step corrections for one row, across the
/// whole estimand grid. Corrections reuse the exact optimizers found for
/// the plug-in values, keeping the pseudo-outcome internally consistent.
pub struct RowCurves {
    pub grid: Vec<f64>,
    pub plugin_lower: Vec<f64>,
    pub plugin_upper: Vec<f64>,
    pub corr_lower: Vec<f64>,
    pub corr_upper: Vec<f64>,
}

fn row_curves_cdf(
    env: &dyn CondNuisance,
    x: &[f64],
    a: u8,
    y: f64,
    grid: &EvalGrid,
) -> Result<RowCurves> {
    let tables = tabulate_arms(env, x, &grid.y)?;
    let pi = env.propensity(x);
    let f1 = |v: f64| tables.f1.eval(v);
    let f0 = |v: f64| tables.f0.eval(v);
    let m = grid.delta.len();
    let mut out = RowCurves {
        grid: grid.delta.clone(),
        plugin_lower: Vec::with_capacity(m),
        plugin_upper: Vec::with_capacity(m),
        corr_lower: Vec::with_capacity(m),
        corr_upper: Vec::with_capacity(m),
    };
    let mut sups = Vec::with_capacity(m);
    let mut infs = Vec::with_capacity(m);
    for &d in &grid.delta {
        let sup = sup_convolution(f1, f0, d, &grid.y)?;
        let inf = inf_convolution(f1, f0, d, &grid.y)?;
        out.plugin_lower.push(sup.value.max(0.0));
        out.plugin_upper
            .push((1.0 + inf.value.min(0.0)).clamp(0.0, 1.0));
        sups.push(sup);
        infs.push(inf);
    }
    // The shifted optimizers fall off the outcome grid, where the
    // tabulated interpolation is biased relative to the model; centering
    // the indicator terms needs the model's own CDF there, batched into
    // one call so kernel weights are prepared once.
    let shifted: Vec<f64> = grid
        .delta
        .iter()
        .enumerate()
        .flat_map(|(j, &d)| [sups[j].smallest() - d, infs[j].smallest() - d])
        .collect();
    let f0_shifted = env.cdf_grid(0, x, &shifted);
    for (j, &d) in grid.delta.iter().enumerate() {
        let ys_lo = sups[j].smallest();
        out.corr_lower.push(cdf_correction_from_parts(
            a,
            y,
            pi,
            d,
            ys_lo,
            f1(ys_lo),
            f0_shifted[2 * j],
            sups[j].value > 0.0,
        ));
        let ys_up = infs[j].smallest();
        out.corr_upper.push(cdf_correction_from_parts(
            a,
            y,
            pi,
            d,
            ys_up,
            f1(ys_up),
            f0_shifted[2 * j + 1],
            infs[j].value < 0.0,
        ));
    }
    Ok(out)
}

fn row_curves_quantile(
    env: &dyn CondNuisance,
    x: &[f64],
    a: u8,
    y: f64,
    grid: &EvalGrid,
) -> Result<RowCurves> {
    let tables = tabulate_arms(env, x, &grid.y)?;
    let pi = env.propensity(x);
    let q1 = |u: f64| tables.f1.invert(u).expect("level in [0, 1]").0;
    let q0 = |u: f64| tables.f0.invert(u).expect("level in [0, 1]").0;
    let m = grid.alpha.len();
    let mut out = RowCurves {
        grid: grid.alpha.clone(),
        plugin_lower: Vec::with_capacity(m),
        plugin_upper: Vec::with_capacity(m),
        corr_lower: Vec::with_capacity(m),
        corr_upper: Vec::with_capacity(m),
    };
    for &alpha in &grid.alpha {
        // interval upper endpoint: inverse of the lower CDF bound
        let lo_side = quantile_lower_inverse(q1, q0, alpha, &grid.alpha)?;
        // interval lower endpoint: inverse of the upper CDF bound
        let up_side = quantile_upper_inverse(q1, q0, alpha, &grid.alpha)?;
        out.plugin_lower.push(up_side.value);
        out.plugin_upper.push(lo_side.value);
        {
            let u = up_side.smallest();
            let shift = u - alpha + 1.0;
            let (q1_at, q0_at) = (q1(u), q0(shift));
            out.corr_lower.push(quantile_correction_from_parts(
                a,
                y,
                pi,
                u,
                shift,
                q1_at,
                q0_at,
                env.density(1, x, q1_at),
                env.density(0, x, q0_at),
            ));
        }
        {
            let u = lo_side.smallest();
            let shift = u - alpha;
            let (q1_at, q0_at) = (q1(u), q0(shift));
            out.corr_upper.push(quantile_correction_from_parts(
                a,
                y,
                pi,
                u,
                shift,
                q1_at,
                q0_at,
                env.density(1, x, q1_at),
                env.density(0, x, q0_at),
            ));
        }
    }
    Ok(out)
}

/// Plug-in values and corrections for one row; the building block of the
/// pseudo-outcome surfaces and of the mean-zero diagnostics.
pub fn row_curves(
    env: &dyn CondNuisance,
    x: &[f64],
    grid: &EvalGrid,
    kind: EstimandKind,
) -> Result<RowCurves> {
    // out-of-sample covariates carry no (a, y); corrections are not
    // meaningful and come back as the a=0, y=0 evaluation
    match kind {
        EstimandKind::Cdf => row_curves_cdf(env, x, 0, 0.0, grid),
        EstimandKind::Quantile => row_curves_quantile(env, x, 0, 0.0, grid),
    }
}

/// Per-row pseudo-outcome values over the estimand grid for one side.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSurface {
    pub side: BoundSide,
    pub kind: EstimandKind,
    pub grid: Vec<f64>,
    /// Row-major `n x grid.len()` values.
    pub values: Vec<f64>,
    pub n: usize,
}

impl PseudoSurface {
    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.grid.len();
        &self.values[i * m..(i + 1) * m]
    }
}

/// Pseudo-outcome surfaces for both sides with explicit per-row nuisance
/// views (`envs[i]` is the view row `i` must use).
pub fn pseudo_surface_with(
    data: &Dataset,
    envs: &[&dyn CondNuisance],
    config: &LearnerConfig,
) -> Result<(PseudoSurface, PseudoSurface)> {
    config.validate()?;
    if envs.len() != data.n() {
        return Err(Error::InvalidData(format!(
            "{} nuisance views for {} rows",
            envs.len(),
            data.n()
        )));
    }
    let gamma = config.effective_gamma();
    let grid = config.grid_values().to_vec();
    let m = grid.len();
    let n = data.n();
    let mut lower = Vec::with_capacity(n * m);
    let mut upper = Vec::with_capacity(n * m);
    for (i, env) in envs.iter().enumerate() {
        let rc = match config.estimand {
            EstimandKind::Cdf => row_curves_cdf(
                *env,
                data.x_row(i),
                data.a()[i],
                data.y()[i],
                &config.eval_grid,
            )?,
            EstimandKind::Quantile => row_curves_quantile(
                *env,
                data.x_row(i),
                data.a()[i],
                data.y()[i],
                &config.eval_grid,
            )?,
        };
        for j in 0..m {
            lower.push(rc.plugin_lower[j] + gamma * rc.corr_lower[j]);
            upper.push(rc.plugin_upper[j] + gamma * rc.corr_upper[j]);
        }
    }
    if lower.iter().chain(upper.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidValues("non-finite pseudo-outcome".into()));
    }
    let mk = |side, values| PseudoSurface {
        side,
        kind: config.estimand,
        grid: grid.clone(),
        values,
        n,
    };
    Ok((mk(BoundSide::Lower, lower), mk(BoundSide::Upper, upper)))
}

/// Pseudo-outcome surfaces using each row's out-of-fold nuisance models.
pub fn pseudo_surface(
    data: &Dataset,
    plan: &CrossFitPlan,
    fit: &NuisanceFit,
    config: &LearnerConfig,
) -> Result<(PseudoSurface, PseudoSurface)> {
    if plan.assignment.len() != data.n() {
        return Err(Error::InvalidData(
            "fold plan does not match dataset length".into(),
        ));
    }
    let envs: Vec<&dyn CondNuisance> = (0..data.n())
        .map(|i| &fit.folds[plan.fold_of(i)] as &dyn CondNuisance)
        .collect();
    pseudo_surface_with(data, &envs, config)
}

/// Degree-2 polynomial basis: 1, x_i, and x_i * x_j for i <= j.
pub fn feature_basis(x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut out = Vec::with_capacity(1 + d + d * (d + 1) / 2);
    out.push(1.0);
    out.extend_from_slice(x);
    for i in 0..d {
        for j in i..d {
            out.push(x[i] * x[j]);
        }
    }
    out
}

/// Per-grid-point ridge regressions of a pseudo-outcome surface on the
/// covariate feature basis; predictions are projected back into the
/// valid-curve class at query time.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct WorkingModel {
    pub side: BoundSide,
    pub kind: EstimandKind,
    pub grid: Vec<f64>,
    pub dim: usize,
    /// `coefs[j]` are the basis weights for grid point `j`.
    pub coefs: Vec<Vec<f64>>,
}

impl WorkingModel {
    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::InvalidData(format!(
                "covariate length {} does not match model dimension {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Unconstrained per-grid-point predictions.
    pub fn predict_raw(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let basis = feature_basis(x);
        Ok(self
            .coefs
            .iter()
            .map(|c| c.iter().zip(&basis).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Predictions projected into the working class: monotone and in
    /// [0, 1] for CDF estimands, monotone for quantile estimands.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let raw = self.predict_raw(x)?;
        Ok(match self.kind {
            EstimandKind::Cdf => project_to_cdf(&raw),
            EstimandKind::Quantile => project_to_quantile(&raw),
        })
    }
}

/// Fit the second-stage working model for one side. The squared losses
/// decompose over grid points, so each column is an independent ridge
/// regression sharing one factorized Gram matrix.
pub fn fit_second_stage(
    surface: &PseudoSurface,
    data: &Dataset,
    config: &LearnerConfig,
) -> Result<WorkingModel> {
    config.validate()?;
    if surface.n == 0 {
        return Err(Error::InvalidData("pseudo surface has no rows".into()));
    }
    if surface.n != data.n() {
        return Err(Error::InvalidData(format!(
            "surface has {} rows but covariates have {}",
            surface.n,
            data.n()
        )));
    }
    let n = data.n();
    let d = data.dim();
    let p = 1 + d + d * (d + 1) / 2;
    let mut design = DMatrix::zeros(n, p);
    for i in 0..n {
        for (j, v) in feature_basis(data.x_row(i)).into_iter().enumerate() {
            design[(i, j)] = v;
        }
    }
    let mut gram = design.transpose() * &design / n as f64;
    for j in 1..p {
        gram[(j, j)] += config.ridge;
    }
    for j in 0..p {
        gram[(j, j)] += 1e-12;
    }
    let chol: Cholesky<f64, Dyn> = gram
        .cholesky()
        .ok_or_else(|| Error::InvalidData("second-stage Gram matrix not factorizable".into()))?;
    let m = surface.grid.len();
    let mut coefs = Vec::with_capacity(m);
    for j in 0..m {
        let col = DVector::from_iterator(n, (0..n).map(|i| surface.values[i * m + j]));
        let rhs = design.transpose() * &col / n as f64;
        let beta = chol.solve(&rhs);
        coefs.push(beta.iter().cloned().collect());
    }
    Ok(WorkingModel {
        side: surface.side,
        kind: surface.kind,
        grid: surface.grid.clone(),
        dim: d,
        coefs,
    })
}

/// Evaluate both working models at `x`, repair any pointwise crossings by
/// swapping, and report how many grid points crossed.
pub fn predict_bounds(
    lower: &WorkingModel,
    upper: &WorkingModel,
    x: &[f64],
) -> Result<(BoundsPair, usize)> {
    if lower.kind != upper.kind || lower.grid != upper.grid {
        return Err(Error::Config(
            "lower and upper working models disagree on estimand or grid".into(),
        ));
    }
    let lo = lower.predict(x)?;
    let up = upper.predict(x)?;
    let mut crossings = 0;
    let mut l = Vec::with_capacity(lo.len());
    let mut u = Vec::with_capacity(lo.len());
    for (a, b) in lo.iter().zip(&up) {
        if a > b {
            crossings += 1;
            l.push(*b);
            u.push(*a);
        } else {
            l.push(*a);
            u.push(*b);
        }
    }
    let pair = BoundsPair::new(lower.kind, lower.grid.clone(), l, u)?;
    Ok((pair, crossings))
}

/// The trained form of each learner.
#[derive(Debug, Clone)]
pub enum LearnerModel {
    /// Plug-in: predictions evaluate the nuisance fit directly.
    Direct,
    /// IPTW: plug-in on inverse-propensity reweighted arm CDF models.
    Reweighted {
        cdf0: CondCdfModel,
        cdf1: CondCdfModel,
    },
    /// CA or AU: projected second-stage regressions per side.
    TwoStage {
        lower: WorkingModel,
        upper: WorkingModel,
    },
}

/// A trained learner bundled with its fold plan and nuisance fit.
pub struct TrainedLearner {
    pub config: LearnerConfig,
    pub plan: CrossFitPlan,
    pub fit: NuisanceFit,
    pub model: LearnerModel,
}

/// Cross-fit the nuisances and train the configured learner.
pub fn train_learner(data: &Dataset, config: &LearnerConfig) -> Result<TrainedLearner> {
    config.validate()?;
    let (plan, fit) = crate::nuisance::cross_fit(data, config.k_folds, &config.nuisance_config())?;
    let model = match config.learner {
        LearnerKind::Plugin => LearnerModel::Direct,
        LearnerKind::Iptw => {
            let (cdf0, cdf1) = iptw_fit(data, &plan, &fit, config.cdf_method)?;
            LearnerModel::Reweighted { cdf0, cdf1 }
        }
        LearnerKind::Ca | LearnerKind::Au => {
            let (lo, up) = pseudo_surface(data, &plan, &fit, config)?;
            let lower = fit_second_stage(&lo, data, config)?;
            let upper = fit_second_stage(&up, data, config)?;
            LearnerModel::TwoStage { lower, upper }
        }
    };
    Ok(TrainedLearner {
        config: config.clone(),
        plan,
        fit,
        model,
    })
}

/// Nuisance view backed by two fixed conditional CDF models (IPTW
/// prediction path; the propensity is unused there).
struct PairEnv<'a> {
    cdf0: &'a CondCdfModel,
    cdf1: &'a CondCdfModel,
    dim: usize,
}

impl CondNuisance for PairEnv<'_> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn propensity(&self, _x: &[f64]) -> f64 {
        0.5
    }
    fn cdf_grid(&self, arm: u8, x: &[f64], ys: &[f64]) -> Vec<f64> {
        let m = if arm == 1 { self.cdf1 } else { self.cdf0 };
        m.cdf_grid(x, ys)
    }
    fn density(&self, arm: u8, x: &[f64], y: f64) -> f64 {
        let m = if arm == 1 { self.cdf1 } else { self.cdf0 };
        m.at(x).density(y)
    }
}

impl TrainedLearner {
    /// Bounds at a covariate value, with the number of grid points where
    /// the two independently fit curves crossed (always 0 for plug-in
    /// style learners, whose curves cannot cross by construction).
    pub fn predict(&self, x: &[f64]) -> Result<(BoundsPair, usize)> {
        match &self.model {
            LearnerModel::Direct => {
                let pair = if self.plan.k == 1 {
                    plugin_bounds(
                        &self.fit.folds[0],
                        x,
                        &self.config.eval_grid,
                        self.config.estimand,
                    )?
                } else {
                    plugin_bounds(
                        &self.fit.pooled(),
                        x,
                        &self.config.eval_grid,
                        self.config.estimand,
                    )?
                };
                Ok((pair, 0))
            }
            LearnerModel::Reweighted { cdf0, cdf1 } => {
                let env = PairEnv {
                    cdf0,
                    cdf1,
                    dim: x.len(),
                };
                let pair = plugin_bounds(&env, x, &self.config.eval_grid, self.config.estimand)?;
                Ok((pair, 0))
            }
            LearnerModel::TwoStage { lower, upper } => predict_bounds(lower, upper, x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::{cross_fit, fit_cond_cdf};
    use crate::stats::{linspace, sigmoid};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn toy_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut a = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let x1: f64 = rng.random_range(-2.0..2.0);
            let x2: f64 = StandardNormal.sample(&mut rng);
            let p = sigmoid(0.5 * x1);
            let ai = u8::from(rng.random::<f64>() < p);
            let eps: f64 = StandardNormal.sample(&mut rng);
            let mu = x1 + ai as f64 - 0.5 * x2;
            x.extend([x1, x2]);
            a.push(ai);
            y.push(mu + eps);
        }
        Dataset::new(x, a, y, 2).unwrap()
    }

    fn small_grid() -> EvalGrid {
        EvalGrid::regular((-4.0, 6.0), 21, 9, (-6.0, 8.0), 141).unwrap()
    }

    fn config(learner: LearnerKind) -> LearnerConfig {
        LearnerConfig::new(learner, EstimandKind::Cdf, LossKind::Crps, small_grid())
    }

    #[test]
    fn config_validation_and_gamma_rules() {
        let mut c = config(LearnerKind::Au);
        assert_eq!(c.gamma, 0.25);
        assert!(c.validate().is_ok());
        c.gamma = 1.5;
        assert!(c.validate().is_err());
        let ca = config(LearnerKind::Ca);
        assert_eq!(ca.effective_gamma(), 0.0);
        let mut au = config(LearnerKind::Au);
        au.gamma = 0.7;
        assert_eq!(au.effective_gamma(), 0.7);
        assert_eq!(config(LearnerKind::Plugin).effective_gamma(), 0.0);
        let w2 = LearnerConfig::new(
            LearnerKind::Au,
            EstimandKind::Quantile,
            LossKind::W2Sq,
            small_grid(),
        );
        assert_eq!(w2.gamma, 0.01);
    }

    #[test]
    fn learner_and_loss_names_round_trip() {
        for k in [
            LearnerKind::Plugin,
            LearnerKind::Iptw,
            LearnerKind::Ca,
            LearnerKind::Au,
        ] {
            assert_eq!(k.to_string().parse::<LearnerKind>().unwrap(), k);
        }
        assert!("boost".parse::<LearnerKind>().is_err());
        for l in [LossKind::Crps, LossKind::W2Sq] {
            assert_eq!(l.to_string().parse::<LossKind>().unwrap(), l);
        }
        assert!("mse".parse::<LossKind>().is_err());
    }

    #[test]
    fn cdf_correction_frozen_values() {
        // treated row, pi = 0.5, outcome below the optimizer, F1(y*) = 0.3
        let c = cdf_correction_from_parts(1, -1.0, 0.5, 0.0, 0.0, 0.3, 0.9, true);
        assert!((c - 1.4).abs() < 1e-12, "{c}");
        // untreated row, outcome above y* - delta, F0(y* - delta) = 0.6
        let c = cdf_correction_from_parts(0, 5.0, 0.5, 0.0, 0.0, 0.3, 0.6, true);
        assert!((c - 1.2).abs() < 1e-12, "{c}");
        // inactive rectifier kills the term
        assert_eq!(
            cdf_correction_from_parts(1, -1.0, 0.5, 0.0, 0.0, 0.3, 0.9, false),
            0.0
        );
    }

    #[test]
    fn quantile_correction_frozen_value() {
        // treated row, pi = 0.5, outcome below the u*-quantile, u* = 0.8,
        // density 0.4: 2 * (1 - 0.8) / 0.4 = 1.0
        let c = quantile_correction_from_parts(1, 0.0, 0.5, 0.8, 0.1, 1.0, -1.0, 0.4, 0.4);
        assert!((c - 1.0).abs() < 1e-12, "{c}");
        // density below the floor is raised to it
        let c = quantile_correction_from_parts(1, 0.0, 0.5, 0.8, 0.1, 1.0, -1.0, 0.0, 0.4);
        assert!((c - 0.2 / DENSITY_FLOOR * 2.0).abs() < 1e-9, "{c}");
    }

    #[test]
    fn ca_surface_equals_plugin_surface_exactly() {
        let data = toy_data(80, 3);
        let cfg = config(LearnerKind::Ca);
        let (plan, fit) = cross_fit(&data, 1, &cfg.nuisance_config()).unwrap();
        let (lo, up) = pseudo_surface(&data, &plan, &fit, &cfg).unwrap();
        for i in 0..data.n() {
            let pair = plugin_bounds(
                &fit.folds[0],
                data.x_row(i),
                &cfg.eval_grid,
                EstimandKind::Cdf,
            )
            .unwrap();
            assert_eq!(lo.row(i), &pair.lower[..], "row {i} lower");
            assert_eq!(up.row(i), &pair.upper[..], "row {i} upper");
        }
    }

    #[test]
    fn gamma_zero_rows_are_valid_cdfs_and_gamma_one_violates() {
        let data = toy_data(120, 5);
        let mut cfg = config(LearnerKind::Au);
        let (plan, fit) = cross_fit(&data, 1, &cfg.nuisance_config()).unwrap();
        cfg.gamma = 0.0;
        let (lo0, up0) = pseudo_surface(&data, &plan, &fit, &cfg).unwrap();
        for i in 0..data.n() {
            GridCdf::new(lo0.grid.clone(), lo0.row(i).to_vec()).expect("gamma=0 lower row");
            GridCdf::new(up0.grid.clone(), up0.row(i).to_vec()).expect("gamma=0 upper row");
        }
        cfg.gamma = 1.0;
        let (lo1, up1) = pseudo_surface(&data, &plan, &fit, &cfg).unwrap();
        let mut violations = 0;
        for i in 0..data.n() {
            if GridCdf::new(lo1.grid.clone(), lo1.row(i).to_vec()).is_err() {
                violations += 1;
            }
            if GridCdf::new(up1.grid.clone(), up1.row(i).to_vec()).is_err() {
                violations += 1;
            }
        }
        assert!(
            violations > 0,
            "expected at least one invalid gamma=1 pseudo-row"
        );
    }

    #[test]
    fn constant_surface_predicts_the_constant() {
        let data = toy_data(60, 7);
        let cfg = config(LearnerKind::Ca);
        let m = cfg.eval_grid.delta.len();
        let surface = PseudoSurface {
            side: BoundSide::Lower,
            kind: EstimandKind::Cdf,
            grid: cfg.eval_grid.delta.clone(),
            values: vec![0.3; data.n() * m],
            n: data.n(),
        };
        let model = fit_second_stage(&surface, &data, &cfg).unwrap();
        for x in [[0.0, 0.0], [1.7, -2.0], [-1.2, 0.4]] {
            for v in model.predict(&x).unwrap() {
                assert!((v - 0.3).abs() < 1e-9, "prediction {v}");
            }
        }
    }

    #[test]
    fn crossing_predictions_swap_and_count() {
        let data = toy_data(50, 9);
        let cfg = config(LearnerKind::Ca);
        let m = cfg.eval_grid.delta.len();
        let mk = |side, c: f64| PseudoSurface {
            side,
            kind: EstimandKind::Cdf,
            grid: cfg.eval_grid.delta.clone(),
            values: vec![c; data.n() * m],
            n: data.n(),
        };
        // deliberately inverted constants: every grid point crosses
        let lower = fit_second_stage(&mk(BoundSide::Lower, 0.6), &data, &cfg).unwrap();
        let upper = fit_second_stage(&mk(BoundSide::Upper, 0.4), &data, &cfg).unwrap();
        let (pair, crossings) = predict_bounds(&lower, &upper, &[0.5, 0.5]).unwrap();
        assert_eq!(crossings, m);
        for j in 0..m {
            assert!((pair.lower[j] - 0.4).abs() < 1e-9);
            assert!((pair.upper[j] - 0.6).abs() < 1e-9);
        }
        // well-ordered constants cross nowhere
        let lower = fit_second_stage(&mk(BoundSide::Lower, 0.2), &data, &cfg).unwrap();
        let upper = fit_second_stage(&mk(BoundSide::Upper, 0.8), &data, &cfg).unwrap();
        let (pair, crossings) = predict_bounds(&lower, &upper, &[0.5, 0.5]).unwrap();
        assert_eq!(crossings, 0);
        assert!((pair.lower[0] - 0.2).abs() < 1e-9);
        assert!((pair.upper[0] - 0.8).abs() < 1e-9);
    }

    #[test]
    fn second_stage_loss_decomposes_over_columns() {
        let data = toy_data(70, 11);
        let cfg = config(LearnerKind::Au);
        let (plan, fit) = cross_fit(&data, 1, &cfg.nuisance_config()).unwrap();
        let (lo, _) = pseudo_surface(&data, &plan, &fit, &cfg).unwrap();
        let model = fit_second_stage(&lo, &data, &cfg).unwrap();
        let deltas = &cfg.eval_grid.delta;
        let w = (deltas.last().unwrap() - deltas[0]) / deltas.len() as f64;
        let m = deltas.len();
        // route 1: per-row integrated squared error
        let mut by_rows = 0.0;
        for i in 0..data.n() {
            let pred = model.predict_raw(data.x_row(i)).unwrap();
            let err: f64 = pred
                .iter()
                .zip(lo.row(i))
                .map(|(p, t)| (p - t) * (p - t) * w)
                .sum();
            by_rows += err;
        }
        by_rows /= data.n() as f64;
        // route 2: per-column mean squared error times grid weight
        let mut by_cols = 0.0;
        for j in 0..m {
            let mut col_err = 0.0;
            for i in 0..data.n() {
                let pred: f64 = model.coefs[j]
                    .iter()
                    .zip(feature_basis(data.x_row(i)))
                    .map(|(c, b)| c * b)
                    .sum();
                let t = lo.values[i * m + j];
                col_err += (pred - t) * (pred - t);
            }
            by_cols += w * col_err / data.n() as f64;
        }
        assert!((by_rows - by_cols).abs() < 1e-10, "{by_rows} vs {by_cols}");
    }

    #[test]
    fn surfaces_are_deterministic() {
        let data = toy_data(60, 13);
        let cfg = config(LearnerKind::Au);
        let (plan, fit) = cross_fit(&data, 2, &cfg.nuisance_config()).unwrap();
        let (lo1, up1) = pseudo_surface(&data, &plan, &fit, &cfg).unwrap();
        let (lo2, up2) = pseudo_surface(&data, &plan, &fit, &cfg).unwrap();
        assert_eq!(lo1.values, lo2.values);
        assert_eq!(up1.values, up2.values);
        let m1 = fit_second_stage(&lo1, &data, &cfg).unwrap();
        let m2 = fit_second_stage(&lo2, &data, &cfg).unwrap();
        assert_eq!(m1.coefs, m2.coefs);
    }

    #[test]
    fn iptw_with_constant_propensity_matches_unweighted_fit() {
        let data = toy_data(90, 15);
        let cfg = config(LearnerKind::Iptw);
        let (plan, mut fit) = cross_fit(&data, 1, &cfg.nuisance_config()).unwrap();
        // force pi = 0.5 everywhere
        fit.folds[0]
            .propensity
            .weights
            .iter_mut()
            .for_each(|w| *w = 0.0);
        let (w0, w1) = iptw_fit(&data, &plan, &fit, cfg.cdf_method).unwrap();
        let plain0 = fit_cond_cdf(&data, 0, cfg.cdf_method).unwrap();
        let plain1 = fit_cond_cdf(&data, 1, cfg.cdf_method).unwrap();
        let ys = linspace(-5.0, 7.0, 31);
        for x in [[0.0, 0.0], [1.0, -1.0]] {
            let a = w0.cdf_grid(&x, &ys);
            let b = plain0.cdf_grid(&x, &ys);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
            let a = w1.cdf_grid(&x, &ys);
            let b = plain1.cdf_grid(&x, &ys);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn iptw_weights_are_inverse_propensities() {
        let data = toy_data(80, 17);
        let cfg = config(LearnerKind::Iptw);
        let (plan, fit) = cross_fit(&data, 1, &cfg.nuisance_config()).unwrap();
        let (w0, _) = iptw_fit(&data, &plan, &fit, cfg.cdf_method).unwrap();
        let CondCdfModel::KernelEmpirical {
            base_weights, ys, ..
        } = &w0
        else {
            panic!("expected kernel model")
        };
        // match each stored row back to its dataset row via the outcome
        for (w, yv) in base_weights.iter().zip(ys) {
            let i = data.y().iter().position(|v| v == yv).unwrap();
            let pi = fit.folds[0].propensity.predict(data.x_row(i));
            assert!((w - 1.0 / (1.0 - pi)).abs() < 1e-12);
        }
        // clip floor 0.05 caps any single weight at 20
        assert!(base_weights.iter().all(|w| *w <= 20.0 + 1e-12));
    }

    #[test]
    fn plugin_bounds_rejects_bad_covariate_length() {
        let data = toy_data(60, 19);
        let cfg = config(LearnerKind::Plugin);
        let (_, fit) = cross_fit(&data, 1, &cfg.nuisance_config()).unwrap();
        let err = plugin_bounds(&fit.folds[0], &[0.0], &cfg.eval_grid, EstimandKind::Cdf);
        assert!(err.is_err());
    }

    #[test]
    fn identical_arm_cdfs_are_uninformative_at_zero() {
        // a hand-built env where both arms share one distribution
        struct SameArms;
        impl CondNuisance for SameArms {
            fn dim(&self) -> usize {
                1
            }
            fn propensity(&self, _x: &[f64]) -> f64 {
                0.5
            }
            fn cdf_grid(&self, _arm: u8, _x: &[f64], ys: &[f64]) -> Vec<f64> {
                ys.iter().map(|y| crate::stats::norm_cdf(*y)).collect()
            }
            fn density(&self, _arm: u8, _x: &[f64], y: f64) -> f64 {
                crate::stats::norm_pdf(y)
            }
        }
        let grid = EvalGrid::regular((-3.0, 3.0), 7, 5, (-7.0, 7.0), 281).unwrap();
        let pair = plugin_bounds(&SameArms, &[0.0], &grid, EstimandKind::Cdf).unwrap();
        let j = grid.delta.iter().position(|d| *d == 0.0).unwrap();
        assert!(pair.lower[j].abs() < 1e-9);
        assert!((pair.upper[j] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn trained_learners_predict_valid_bounds() {
        let data = toy_data(150, 21);
        for kind in [
            LearnerKind::Plugin,
            LearnerKind::Iptw,
            LearnerKind::Ca,
            LearnerKind::Au,
        ] {
            let learner = train_learner(&data, &config(kind)).unwrap();
            let (pair, crossings) = learner.predict(&[0.5, -0.5]).unwrap();
            assert_eq!(pair.grid.len(), 21);
            for j in 0..pair.grid.len() {
                assert!(pair.lower[j] <= pair.upper[j] + 1e-9, "{kind} crossed");
                assert!((0.0..=1.0).contains(&pair.lower[j]));
                assert!((0.0..=1.0).contains(&pair.upper[j]));
            }
            if matches!(kind, LearnerKind::Plugin | LearnerKind::Iptw) {
                assert_eq!(crossings, 0);
            }
        }
    }

    #[test]
    fn quantile_pipeline_runs_end_to_end() {
        let data = toy_data(150, 23);
        let mut cfg = LearnerConfig::new(
            LearnerKind::Au,
            EstimandKind::Quantile,
            LossKind::W2Sq,
            small_grid(),
        );
        cfg.gamma = 0.01;
        let learner = train_learner(&data, &cfg).unwrap();
        let (pair, _) = learner.predict(&[0.3, 0.1]).unwrap();
        assert_eq!(pair.kind, EstimandKind::Quantile);
        for j in 1..pair.grid.len() {
            assert!(
                pair.lower[j] + 1e-9 >= pair.lower[j - 1],
                "lower endpoint not monotone"
            );
            assert!(
                pair.upper[j] + 1e-9 >= pair.upper[j - 1],
                "upper endpoint not monotone"
            );
        }
    }
}
