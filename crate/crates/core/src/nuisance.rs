//! First-stage nuisance estimation: the propensity score and the per-arm
//! conditional outcome distributions, plus the cross-fitting fold plan that
//! keeps every row out of the fits used to form its own pseudo-outcome.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::stats::{norm_pdf, sample_sd, sigmoid};
use nalgebra::{DMatrix, DVector};

/// Default clipping floor for estimated propensities.
pub const DEFAULT_CLIP_FLOOR: f64 = 0.05;
/// Default ridge penalty for the propensity fit; stabilizes the Newton
/// iteration on separable data.
pub const DEFAULT_PROPENSITY_L2: f64 = 1e-3;
/// Floor applied to conditional densities wherever they enter a ratio.
pub const DENSITY_FLOOR: f64 = 1e-4;

const IRLS_MAX_ITER: usize = 100;
const IRLS_GRAD_TOL: f64 = 1e-8;
const MIN_ARM_ROWS: usize = 10;

/// Clip a probability into `[floor, 1 - floor]`.
pub fn clip_propensity(p: f64, floor: f64) -> f64 {
    p.clamp(floor, 1.0 - floor)
}

/// Logistic-regression propensity model; weights are (intercept, x).
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PropensityModel {
    pub weights: Vec<f64>,
    pub clip_floor: f64,
    pub converged: bool,
    objective_trace: Vec<f64>,
}

impl PropensityModel {
    /// Linear predictor at `x`.
    fn logit(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len() + 1, self.weights.len(), "covariate length mismatch");
        let mut eta = self.weights[0];
        for (w, v) in self.weights[1..].iter().zip(x) {
            eta += w * v;
        }
        eta
    }

    /// Unclipped predicted probability of treatment.
    pub fn predict_raw(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }

    /// Predicted probability of treatment, clipped to
    /// `[clip_floor, 1 - clip_floor]`.
    pub fn predict(&self, x: &[f64]) -> f64 {
        clip_propensity(self.predict_raw(x), self.clip_floor)
    }

    /// Replace the clipping floor (must lie in (0, 0.5)).
    pub fn with_clip_floor(mut self, floor: f64) -> Result<Self> {
        if !(floor > 0.0 && floor < 0.5) {
            return Err(Error::Config(format!(
                "clip floor {floor} outside (0, 0.5)"
            )));
        }
        self.clip_floor = floor;
        Ok(self)
    }

    /// Penalized negative log-likelihood after each accepted iteration,
    /// starting from the zero-weight initializer. Nonincreasing.
    pub fn objective_trace(&self) -> &[f64] {
        &self.objective_trace
    }
}

fn penalized_nll(x: &DMatrix<f64>, a: &DVector<f64>, beta: &DVector<f64>, l2: f64) -> f64 {
    let eta = x * beta;
    let n = x.nrows() as f64;
    let mut nll = 0.0;
    for i in 0..x.nrows() {
        let e = eta[i];
        // log(1 + exp(e)) without overflow
        let log1pe = if e > 0.0 {
            e + (-e).exp().ln_1p()
        } else {
            e.exp().ln_1p()
        };
        nll += log1pe - a[i] * e;
    }
    let mut pen = 0.0;
    for j in 1..beta.len() {
        pen += beta[j] * beta[j];
    }
    nll / n + 0.5 * l2 * pen
}

/// Fit the propensity score by ridge-penalized logistic regression
/// (Newton / iteratively reweighted least squares; the intercept is not
/// penalized). Runs to gradient-norm tolerance 1e-8 or 100 iterations;
/// on non-convergence the best iterate is returned with `converged` unset.
pub fn fit_propensity(data: &Dataset, l2: f64) -> Result<PropensityModel> {
    if l2.is_nan() || l2 < 0.0 {
        return Err(Error::Config(format!(
            "ridge penalty {l2} must be nonnegative"
        )));
    }
    let n = data.n();
    let n1 = data.a().iter().filter(|a| **a == 1).count();
    if n1 == 0 || n1 == n {
        return Err(Error::InvalidData(
            "propensity fit needs both treatment arms present".into(),
        ));
    }
    let d = data.dim();
    let p = d + 1;
    let mut design = DMatrix::zeros(n, p);
    for i in 0..n {
        design[(i, 0)] = 1.0;
        for (j, v) in data.x_row(i).iter().enumerate() {
            design[(i, j + 1)] = *v;
        }
    }
    let avec = DVector::from_iterator(n, data.a().iter().map(|a| *a as f64));
    let mut beta = DVector::zeros(p);
    let mut nll = penalized_nll(&design, &avec, &beta, l2);
    let mut trace = vec![nll];
    let mut converged = false;
    for _ in 0..IRLS_MAX_ITER {
        let eta = &design * &beta;
        let probs = DVector::from_iterator(n, eta.iter().map(|e| sigmoid(*e)));
        let mut grad = design.transpose() * (&probs - &avec) / n as f64;
        for j in 1..p {
            grad[j] += l2 * beta[j];
        }
        if grad.norm() < IRLS_GRAD_TOL {
            converged = true;
            break;
        }
        let mut hess = DMatrix::zeros(p, p);
        for i in 0..n {
            let w = probs[i] * (1.0 - probs[i]);
            for r in 0..p {
                for c in r..p {
                    hess[(r, c)] += w * design[(i, r)] * design[(i, c)];
                }
            }
        }
        for r in 0..p {
            for c in 0..r {
                hess[(r, c)] = hess[(c, r)];
            }
        }
        hess /= n as f64;
        for j in 1..p {
            hess[(j, j)] += l2;
        }
        // tiny jitter keeps the intercept block factorizable under
        // near-separation, where all working weights vanish
        for j in 0..p {
            hess[(j, j)] += 1e-12;
        }
        let step = match hess.cholesky() {
            Some(ch) => ch.solve(&grad),
            None => break,
        };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta - scale * &step;
            let cand_nll = penalized_nll(&design, &avec, &cand, l2);
            if cand_nll <= nll {
                beta = cand;
                nll = cand_nll;
                trace.push(nll);
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(PropensityModel {
        weights: beta.iter().cloned().collect(),
        clip_floor: DEFAULT_CLIP_FLOOR,
        converged,
        objective_trace: trace,
    })
}

/// Estimator family for the conditional outcome CDF of one arm.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub enum CdfMethod {
    /// Linear-in-x mean with a constant residual scale; exact when the
    /// outcome is conditionally normal with a linear mean.
    GaussianLocScale,
    /// Nadaraya-Watson weighted empirical CDF with a Gaussian kernel in x;
    /// `bandwidth_scale` multiplies the per-dimension Scott's-rule
    /// bandwidth `sd_j * n^(-1/(d+4))`.
    KernelEmpirical { bandwidth_scale: f64 },
}

impl Default for CdfMethod {
    fn default() -> Self {
        CdfMethod::KernelEmpirical {
            bandwidth_scale: 1.0,
        }
    }
}

/// A fitted conditional outcome CDF for one arm.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub enum CondCdfModel {
    GaussianLocScale {
        arm: u8,
        /// (intercept, x) least-squares weights for the conditional mean.
        mean_weights: Vec<f64>,
        /// Residual standard deviation, constant in x.
        scale: f64,
    },
    KernelEmpirical {
        arm: u8,
        dim: usize,
        /// Training covariates, row-major, ordered by ascending outcome.
        xs: Vec<f64>,
        /// Training outcomes, ascending.
        ys: Vec<f64>,
        /// Per-row multipliers on the kernel weight (1 unless reweighted).
        base_weights: Vec<f64>,
        /// Per-dimension kernel bandwidths in x.
        bandwidths: Vec<f64>,
        /// Outcome-direction bandwidth; sets the density difference step.
        h_y: f64,
    },
}

/// One conditional CDF pinned at a query point, ready for repeated
/// evaluation in y. Kernel weights are computed once per query point.
pub enum PreparedCdf<'a> {
    Gaussian {
        mean: f64,
        scale: f64,
    },
    Kernel {
        ys: &'a [f64],
        /// `cum[i]` = total weight of the first `i` sorted outcomes.
        cum: Vec<f64>,
        total: f64,
        h_y: f64,
    },
}

impl CondCdfModel {
    pub fn arm(&self) -> u8 {
        match self {
            CondCdfModel::GaussianLocScale { arm, .. } => *arm,
            CondCdfModel::KernelEmpirical { arm, .. } => *arm,
        }
    }

    /// Pin the model at a covariate value.
    pub fn at<'a>(&'a self, x: &[f64]) -> PreparedCdf<'a> {
        match self {
            CondCdfModel::GaussianLocScale {
                mean_weights,
                scale,
                ..
            } => {
                assert_eq!(x.len() + 1, mean_weights.len(), "covariate length mismatch");
                let mut mean = mean_weights[0];
                for (w, v) in mean_weights[1..].iter().zip(x) {
                    mean += w * v;
                }
                PreparedCdf::Gaussian {
                    mean,
                    scale: *scale,
                }
            }
            CondCdfModel::KernelEmpirical {
                dim,
                xs,
                ys,
                base_weights,
                bandwidths,
                h_y,
                ..
            } => {
                assert_eq!(x.len(), *dim, "covariate length mismatch");
                let n = ys.len();
                let mut cum = Vec::with_capacity(n + 1);
                cum.push(0.0);
                let mut acc = 0.0;
                for i in 0..n {
                    let mut q = 0.0;
                    for j in 0..*dim {
                        let z = (x[j] - xs[i * dim + j]) / bandwidths[j];
                        q += z * z;
                    }
                    acc += base_weights[i] * (-0.5 * q).exp();
                    cum.push(acc);
                }
                let mut total = acc;
                if total.is_nan() || total <= 1e-300 {
                    // query far outside the data: every kernel weight
                    // underflowed, so fall back to the base-weighted
                    // marginal CDF rather than returning NaN
                    cum.clear();
                    cum.push(0.0);
                    acc = 0.0;
                    for w in base_weights {
                        acc += w;
                        cum.push(acc);
                    }
                    total = acc;
                }
                PreparedCdf::Kernel {
                    ys,
                    cum,
                    total,
                    h_y: *h_y,
                }
            }
        }
    }

    /// Conditional CDF at a single point.
    pub fn cdf(&self, x: &[f64], y: f64) -> f64 {
        self.at(x).cdf(y)
    }

    /// Conditional CDF at many points (one kernel-weight pass).
    pub fn cdf_grid(&self, x: &[f64], ys: &[f64]) -> Vec<f64> {
        let p = self.at(x);
        ys.iter().map(|y| p.cdf(*y)).collect()
    }
}

impl PreparedCdf<'_> {
    pub fn cdf(&self, y: f64) -> f64 {
        match self {
            PreparedCdf::Gaussian { mean, scale } => crate::stats::norm_cdf((y - mean) / scale),
            PreparedCdf::Kernel { ys, cum, total, .. } => {
                let i = ys.partition_point(|v| *v <= y);
                cum[i] / total
            }
        }
    }

    /// Conditional density: exact for the gaussian family, a central
    /// finite difference of the CDF with step `h_y / 4` (floored at
    /// [`DENSITY_FLOOR`]) for the kernel family.
    pub fn density(&self, y: f64) -> f64 {
        match self {
            PreparedCdf::Gaussian { mean, scale } => norm_pdf((y - mean) / scale) / scale,
            PreparedCdf::Kernel { h_y, .. } => {
                let step = (h_y / 4.0).max(1e-12);
                let slope = (self.cdf(y + step) - self.cdf(y - step)) / (2.0 * step);
                slope.max(DENSITY_FLOOR)
            }
        }
    }
}

/// Conditional outcome density of a fitted model at `(y, x)`.
pub fn cond_density(model: &CondCdfModel, y: f64, x: &[f64]) -> f64 {
    model.at(x).density(y)
}

fn arm_rows(data: &Dataset, arm: u8) -> Result<Vec<usize>> {
    let rows = data.arm_indices(arm);
    if rows.len() < MIN_ARM_ROWS {
        return Err(Error::InvalidData(format!(
            "arm {arm} has {} rows; at least {MIN_ARM_ROWS} required",
            rows.len()
        )));
    }
    Ok(rows)
}

/// Fit a conditional outcome CDF for one arm with unit base weights.
pub fn fit_cond_cdf(data: &Dataset, arm: u8, method: CdfMethod) -> Result<CondCdfModel> {
    let rows = arm_rows(data, arm)?;
    let w = vec![1.0; rows.len()];
    fit_cond_cdf_rows(data, arm, &rows, &w, method)
}

/// Fit a kernel conditional CDF for one arm with per-row base weights
/// (ordered like `data.arm_indices(arm)`); used by inverse-propensity
/// reweighting. Only the kernel family supports reweighting.
pub fn fit_cond_cdf_weighted(
    data: &Dataset,
    arm: u8,
    base_weights: &[f64],
    method: CdfMethod,
) -> Result<CondCdfModel> {
    if matches!(method, CdfMethod::GaussianLocScale) {
        return Err(Error::Config(
            "reweighted fits are only supported for the kernel family".into(),
        ));
    }
    let rows = arm_rows(data, arm)?;
    if base_weights.len() != rows.len() {
        return Err(Error::InvalidData(format!(
            "{} base weights for {} arm rows",
            base_weights.len(),
            rows.len()
        )));
    }
    if base_weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
        return Err(Error::InvalidData(
            "base weights must be finite and positive".into(),
        ));
    }
    fit_cond_cdf_rows(data, arm, &rows, base_weights, method)
}

fn fit_cond_cdf_rows(
    data: &Dataset,
    arm: u8,
    rows: &[usize],
    base_weights: &[f64],
    method: CdfMethod,
) -> Result<CondCdfModel> {
    let d = data.dim();
    match method {
        CdfMethod::GaussianLocScale => {
            let n = rows.len();
            let p = d + 1;
            let mut design = DMatrix::zeros(n, p);
            let mut yv = DVector::zeros(n);
            for (r, &i) in rows.iter().enumerate() {
                design[(r, 0)] = 1.0;
                for (j, v) in data.x_row(i).iter().enumerate() {
                    design[(r, j + 1)] = *v;
                }
                yv[r] = data.y()[i];
            }
            let mut gram = design.transpose() * &design;
            for j in 0..p {
                gram[(j, j)] += 1e-10;
            }
            let rhs = design.transpose() * &yv;
            let weights = gram
                .cholesky()
                .ok_or_else(|| Error::InvalidData("singular design in mean fit".into()))?
                .solve(&rhs);
            let resid = &yv - &design * &weights;
            let dof = if n > p { n - p } else { n };
            let scale = (resid.norm_squared() / dof as f64).sqrt().max(1e-6);
            Ok(CondCdfModel::GaussianLocScale {
                arm,
                mean_weights: weights.iter().cloned().collect(),
                scale,
            })
        }
        CdfMethod::KernelEmpirical { bandwidth_scale } => {
            if !bandwidth_scale.is_finite() || bandwidth_scale <= 0.0 {
                return Err(Error::Config(format!(
                    "bandwidth scale {bandwidth_scale} must be positive"
                )));
            }
            let n = rows.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| data.y()[rows[a]].partial_cmp(&data.y()[rows[b]]).unwrap());
            let mut xs = Vec::with_capacity(n * d);
            let mut ys = Vec::with_capacity(n);
            let mut w = Vec::with_capacity(n);
            for &r in &order {
                xs.extend_from_slice(data.x_row(rows[r]));
                ys.push(data.y()[rows[r]]);
                w.push(base_weights[r]);
            }
            // Scott's rule per covariate dimension
            let shrink = (n as f64).powf(-1.0 / (d as f64 + 4.0));
            let mut bandwidths = Vec::with_capacity(d);
            for j in 0..d {
                let col: Vec<f64> = (0..n).map(|i| xs[i * d + j]).collect();
                bandwidths.push((sample_sd(&col) * shrink * bandwidth_scale).max(1e-6));
            }
            let h_y = (sample_sd(&ys) * shrink * bandwidth_scale).max(1e-6);
            Ok(CondCdfModel::KernelEmpirical {
                arm,
                dim: d,
                xs,
                ys,
                base_weights: w,
                bandwidths,
                h_y,
            })
        }
    }
}

/// Settings shared by every per-fold nuisance fit.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceConfig {
    pub method: CdfMethod,
    pub l2: f64,
    pub clip_floor: f64,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            method: CdfMethod::default(),
            l2: DEFAULT_PROPENSITY_L2,
            clip_floor: DEFAULT_CLIP_FLOOR,
        }
    }
}

/// Row-to-fold assignment for cross-fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossFitPlan {
    pub k: usize,
    pub assignment: Vec<usize>,
}

impl CrossFitPlan {
    /// Fold of row `i`; its pseudo-outcome must use that fold's models.
    pub fn fold_of(&self, i: usize) -> usize {
        self.assignment[i]
    }
}

/// The nuisance models fit for one fold: fit on that fold's complement
/// (or on all rows in the K=1 same-data mode).
#[derive(Debug, Clone, serde::Serialize)]
pub struct FoldModels {
    pub propensity: PropensityModel,
    pub cdf0: CondCdfModel,
    pub cdf1: CondCdfModel,
}

impl FoldModels {
    pub fn cdf_model(&self, arm: u8) -> &CondCdfModel {
        if arm == 1 {
            &self.cdf1
        } else {
            &self.cdf0
        }
    }
}

/// Per-fold nuisance fits; `folds[k]` was fit without the rows of fold `k`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct NuisanceFit {
    pub folds: Vec<FoldModels>,
}

/// Build the fold plan and fit the per-fold nuisance models.
///
/// Fold assignment is `i mod K` unless the dataset carries explicit fold
/// indices. Fold `k`'s models are fit on its complement; `K = 1` is the
/// same-data mode where one set of models is fit on all rows and reused
/// everywhere. Every fold must be nonempty and every complement must
/// contain both arms.
pub fn cross_fit(
    data: &Dataset,
    k: usize,
    config: &NuisanceConfig,
) -> Result<(CrossFitPlan, NuisanceFit)> {
    if k == 0 {
        return Err(Error::Config("fold count must be at least 1".into()));
    }
    if !(config.clip_floor > 0.0 && config.clip_floor < 0.5) {
        return Err(Error::Config(format!(
            "clip floor {} outside (0, 0.5)",
            config.clip_floor
        )));
    }
    let n = data.n();
    let assignment: Vec<usize> = match data.folds() {
        Some(f) => {
            if f.iter().any(|&fi| fi >= k) {
                return Err(Error::Config(format!(
                    "dataset fold indices exceed requested fold count {k}"
                )));
            }
            f.to_vec()
        }
        None => (0..n).map(|i| i % k).collect(),
    };
    for fold in 0..k {
        if !assignment.contains(&fold) {
            return Err(Error::Config(format!("fold {fold} is empty")));
        }
    }
    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let train: Vec<usize> = if k == 1 {
            (0..n).collect()
        } else {
            (0..n).filter(|&i| assignment[i] != fold).collect()
        };
        let sub = data.subset(&train)?;
        for arm in [0u8, 1u8] {
            if !sub.a().contains(&arm) {
                return Err(Error::EmptyArmInFold { fold, arm });
            }
        }
        let propensity = fit_propensity(&sub, config.l2)?.with_clip_floor(config.clip_floor)?;
        let cdf0 = fit_cond_cdf(&sub, 0, config.method)?;
        let cdf1 = fit_cond_cdf(&sub, 1, config.method)?;
        folds.push(FoldModels {
            propensity,
            cdf0,
            cdf1,
        });
    }
    Ok((CrossFitPlan { k, assignment }, NuisanceFit { folds }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridCdf;
    use crate::stats::linspace;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn toy_data(n: usize, seed: u64, signal: bool) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::with_capacity(2 * n);
        let mut a = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let x1: f64 = rng.random_range(-2.0..2.0);
            let x2: f64 = StandardNormal.sample(&mut rng);
            let p = if signal {
                sigmoid(0.8 * x1 - 0.5 * x2)
            } else {
                0.5
            };
            let ai = if rng.random::<f64>() < p { 1u8 } else { 0u8 };
            let eps: f64 = StandardNormal.sample(&mut rng);
            x.push(x1);
            x.push(x2);
            a.push(ai);
            y.push(1.0 + 2.0 * x1 - x2 + ai as f64 + eps);
        }
        Dataset::new(x, a, y, 2).unwrap()
    }

    #[test]
    fn balanced_data_predicts_one_half() {
        let data = toy_data(8000, 11, false);
        let model = fit_propensity(&data, 1e-3).unwrap();
        assert!(model.converged);
        for x in [[0.0, 0.0], [1.5, -1.0], [-2.0, 2.0]] {
            let p = model.predict(&x);
            assert!((p - 0.5).abs() < 0.02, "prediction {p} at {x:?}");
        }
    }

    #[test]
    fn propensity_recovers_signal() {
        let data = toy_data(4000, 12, true);
        let model = fit_propensity(&data, 1e-3).unwrap();
        assert!(model.converged);
        assert!(
            (model.weights[1] - 0.8).abs() < 0.15,
            "w1 {}",
            model.weights[1]
        );
        assert!(
            (model.weights[2] + 0.5).abs() < 0.15,
            "w2 {}",
            model.weights[2]
        );
    }

    #[test]
    fn single_arm_data_is_rejected() {
        let data =
            Dataset::new(vec![0.0, 1.0, 2.0], vec![1, 1, 1], vec![0.0, 1.0, 2.0], 1).unwrap();
        assert!(fit_propensity(&data, 1e-3).is_err());
    }

    #[test]
    fn irls_objective_is_nonincreasing() {
        let data = toy_data(500, 13, true);
        let model = fit_propensity(&data, 1e-3).unwrap();
        let trace = model.objective_trace();
        assert!(trace.len() >= 2);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "objective rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn clip_propensity_examples() {
        assert_eq!(clip_propensity(0.01, 0.05), 0.05);
        assert_eq!(clip_propensity(0.5, 0.05), 0.5);
        assert_eq!(clip_propensity(0.99, 0.05), 0.95);
    }

    #[test]
    fn gaussian_fit_recovers_linear_model() {
        let data = toy_data(5000, 17, false);
        let model = fit_cond_cdf(&data, 1, CdfMethod::GaussianLocScale).unwrap();
        let CondCdfModel::GaussianLocScale {
            mean_weights,
            scale,
            ..
        } = &model
        else {
            panic!("wrong family")
        };
        // treated rows: y = 2 + 2 x1 - x2 + eps
        assert!((mean_weights[0] - 2.0).abs() < 0.1);
        assert!((mean_weights[1] - 2.0).abs() < 0.1);
        assert!((mean_weights[2] + 1.0).abs() < 0.1);
        assert!((scale - 1.0).abs() < 0.05, "scale {scale}");
    }

    #[test]
    fn gaussian_density_frozen_values() {
        let model = CondCdfModel::GaussianLocScale {
            arm: 1,
            mean_weights: vec![1.0, 2.0],
            scale: 1.0,
        };
        // mean at x = 3 is 7
        let at_mean = cond_density(&model, 7.0, &[3.0]);
        assert!((at_mean - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
        let one_off = cond_density(&model, 8.0, &[3.0]);
        assert!((one_off - 0.2420).abs() < 1e-4, "density {one_off}");
    }

    #[test]
    fn gaussian_cdf_and_density_are_consistent() {
        let data = toy_data(500, 19, false);
        let model = fit_cond_cdf(&data, 0, CdfMethod::GaussianLocScale).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let y = rng.random_range(-4.0..6.0);
            let p = model.at(&x);
            let eps = 1e-5;
            let fd = (p.cdf(y + eps) - p.cdf(y - eps)) / (2.0 * eps);
            assert!((fd - p.density(y)).abs() < 1e-4, "mismatch at y={y}");
        }
    }

    #[test]
    fn kernel_with_huge_bandwidth_matches_marginal_ecdf() {
        let data = toy_data(300, 23, false);
        let model = fit_cond_cdf(
            &data,
            1,
            CdfMethod::KernelEmpirical {
                bandwidth_scale: 1e8,
            },
        )
        .unwrap();
        let mut arm_ys = data.arm_outcomes(1);
        arm_ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = arm_ys.len() as f64;
        for &q in &[0.1f64, 1.0, 2.5, 4.0] {
            let ecdf = arm_ys.iter().filter(|y| **y <= q).count() as f64 / m;
            let got = model.cdf(&[0.3, -0.4], q);
            assert!((got - ecdf).abs() < 1e-6, "q={q}: {got} vs {ecdf}");
        }
    }

    #[test]
    fn kernel_cdf_saturates_at_arm_maximum() {
        let data = toy_data(100, 29, false);
        let model = fit_cond_cdf(&data, 0, CdfMethod::default()).unwrap();
        let max_y = data
            .arm_outcomes(0)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(model.cdf(&[0.0, 0.0], max_y), 1.0);
        assert_eq!(model.cdf(&[1.0, 1.0], max_y + 1e-9), 1.0);
    }

    #[test]
    fn kernel_density_integrates_to_one() {
        let data = toy_data(400, 31, false);
        let model = fit_cond_cdf(&data, 0, CdfMethod::default()).unwrap();
        let p = model.at(&[0.5, 0.0]);
        let grid = linspace(-8.0, 10.0, 1801);
        let w = (grid.last().unwrap() - grid[0]) / grid.len() as f64;
        let mass: f64 = grid.iter().map(|y| p.density(*y) * w).sum();
        assert!((mass - 1.0).abs() < 0.02, "mass {mass}");
    }

    #[test]
    fn evaluated_cdfs_are_valid_on_grids() {
        let data = toy_data(200, 37, true);
        let grid = linspace(-6.0, 8.0, 101);
        let models = [
            fit_cond_cdf(&data, 0, CdfMethod::GaussianLocScale).unwrap(),
            fit_cond_cdf(&data, 1, CdfMethod::default()).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..100 {
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            for model in &models {
                let probs = model.cdf_grid(&x, &grid);
                GridCdf::new(grid.clone(), probs).expect("invalid conditional CDF");
            }
        }
    }

    #[test]
    fn too_few_arm_rows_is_rejected() {
        let data = Dataset::new(
            (0..12).map(|i| i as f64).collect(),
            vec![1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0],
            (0..12).map(|i| i as f64).collect(),
            1,
        )
        .unwrap();
        assert!(fit_cond_cdf(&data, 0, CdfMethod::default()).is_err());
        assert!(fit_cond_cdf(&data, 1, CdfMethod::default()).is_ok());
    }

    #[test]
    fn weighted_fit_validates_inputs() {
        let data = toy_data(50, 43, false);
        let n1 = data.arm_indices(1).len();
        assert!(fit_cond_cdf_weighted(&data, 1, &vec![1.0; n1], CdfMethod::default()).is_ok());
        assert!(fit_cond_cdf_weighted(&data, 1, &vec![1.0; n1 - 1], CdfMethod::default()).is_err());
        assert!(fit_cond_cdf_weighted(&data, 1, &vec![0.0; n1], CdfMethod::default()).is_err());
        assert!(
            fit_cond_cdf_weighted(&data, 1, &vec![1.0; n1], CdfMethod::GaussianLocScale).is_err()
        );
    }

    fn kernel_training_outcomes(model: &CondCdfModel) -> Vec<f64> {
        let CondCdfModel::KernelEmpirical { ys, .. } = model else {
            panic!("expected kernel model")
        };
        ys.clone()
    }

    #[test]
    fn cross_fit_respects_fold_complements() {
        // y encodes the row index, so the kernel training sets reveal
        // exactly which rows each fold's models saw
        let n = 40;
        let x: Vec<f64> = (0..n).map(|i| (i as f64) / 7.0).collect();
        let a: Vec<u8> = (0..n).map(|i| ((i / 2) % 2) as u8).collect();
        let y: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let data = Dataset::new(x, a, y, 1).unwrap();
        let (plan, fit) = cross_fit(&data, 2, &NuisanceConfig::default()).unwrap();
        assert_eq!(plan.k, 2);
        assert_eq!(plan.assignment[..4], [0, 1, 0, 1]);
        for fold in 0..2 {
            for arm in [0u8, 1u8] {
                let seen = kernel_training_outcomes(fit.folds[fold].cdf_model(arm));
                for v in seen {
                    let row = v as usize;
                    assert_ne!(row % 2, fold, "fold {fold} saw its own row {row}");
                    assert_eq!(data.a()[row], arm);
                }
            }
        }
    }

    #[test]
    fn same_data_mode_uses_all_rows() {
        let data = toy_data(60, 47, false);
        let (plan, fit) = cross_fit(&data, 1, &NuisanceConfig::default()).unwrap();
        assert_eq!(plan.assignment, vec![0; 60]);
        let n0 = data.arm_indices(0).len();
        let n1 = data.arm_indices(1).len();
        assert_eq!(kernel_training_outcomes(&fit.folds[0].cdf0).len(), n0);
        assert_eq!(kernel_training_outcomes(&fit.folds[0].cdf1).len(), n1);
    }

    #[test]
    fn leave_one_out_uses_all_but_one_row() {
        let data = toy_data(32, 53, false);
        let (plan, fit) = cross_fit(&data, 32, &NuisanceConfig::default()).unwrap();
        assert_eq!(plan.k, 32);
        for fold in 0..32 {
            let total = kernel_training_outcomes(&fit.folds[fold].cdf0).len()
                + kernel_training_outcomes(&fit.folds[fold].cdf1).len();
            assert_eq!(total, 31);
        }
    }

    #[test]
    fn missing_arm_in_complement_names_the_fold() {
        // fold 0 = rows {0, 2} (arm 0), fold 1 = rows {1, 3} (arm 1);
        // fold 0 trains on fold 1 only, which lacks arm 0
        let data = Dataset::new(
            (0..24).map(|i| i as f64).collect(),
            (0..24).map(|i| (i % 2) as u8).collect(),
            (0..24).map(|i| i as f64).collect(),
            1,
        )
        .unwrap();
        let err = cross_fit(&data, 2, &NuisanceConfig::default()).unwrap_err();
        match err {
            Error::EmptyArmInFold { fold: 0, arm: 0 } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn explicit_fold_indices_override_modular_rule() {
        let n = 80;
        let folds: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();
        let data = toy_data(n, 59, false).with_folds(folds.clone(), 2).unwrap();
        let (plan, _) = cross_fit(&data, 2, &NuisanceConfig::default()).unwrap();
        assert_eq!(plan.assignment, folds);
        assert!(cross_fit(&data, 4, &NuisanceConfig::default()).is_err());
    }

    #[test]
    fn cross_fit_is_deterministic() {
        let data = toy_data(80, 61, true);
        let cfg = NuisanceConfig::default();
        let (_, f1) = cross_fit(&data, 2, &cfg).unwrap();
        let (_, f2) = cross_fit(&data, 2, &cfg).unwrap();
        for (a, b) in f1.folds.iter().zip(&f2.folds) {
            assert_eq!(a.propensity.weights, b.propensity.weights);
            assert_eq!(
                kernel_training_outcomes(&a.cdf0),
                kernel_training_outcomes(&b.cdf0)
            );
        }
    }

    #[test]
    fn fold_count_validation() {
        let data = toy_data(30, 67, false);
        assert!(cross_fit(&data, 0, &NuisanceConfig::default()).is_err());
        // more folds than rows leaves empty folds
        assert!(cross_fit(&data, 31, &NuisanceConfig::default()).is_err());
        let bad = NuisanceConfig {
            clip_floor: 0.6,
            ..NuisanceConfig::default()
        };
        assert!(cross_fit(&data, 2, &bad).is_err());
    }
}
