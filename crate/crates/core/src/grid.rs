//! Grid-backed distribution representations and the metric/projection
//! operations built on them.
//!
//! Every distribution-valued object in this crate is carried on a finite
//! grid: a CDF is a vector of probabilities on an increasing outcome grid, a
//! quantile function is a vector of outcome values on an increasing level
//! grid. Between knots both are interpolated linearly; outside the grid they
//! are extended flat. These conventions are relied on by the bound
//! computations, so they live here in one place.

use crate::error::{Error, Result};
use crate::stats::linspace;

/// Tolerance used when deciding whether a grid is uniformly spaced.
const UNIFORM_REL_TOL: f64 = 1e-9;

fn check_strictly_increasing(v: &[f64], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::InvalidGrid(format!("{what} is empty")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidGrid(format!("{what} has non-finite entries")));
    }
    if v.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid(format!(
            "{what} must be strictly increasing"
        )));
    }
    Ok(())
}

fn uniform_step(grid: &[f64]) -> Option<f64> {
    if grid.len() < 2 {
        return None;
    }
    let h = (grid[grid.len() - 1] - grid[0]) / (grid.len() - 1) as f64;
    let tol = UNIFORM_REL_TOL * h.abs().max(1.0);
    for w in grid.windows(2) {
        if ((w[1] - w[0]) - h).abs() > tol {
            return None;
        }
    }
    Some(h)
}

/// A CDF tabulated on a strictly increasing outcome grid.
///
/// Invariants, checked at construction: the grid is strictly increasing and
/// finite; the probabilities are nondecreasing and lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCdf {
    grid: Vec<f64>,
    probs: Vec<f64>,
    // cached step size when the grid is uniform; enables O(1) evaluation
    step: Option<f64>,
}

impl GridCdf {
    pub fn new(grid: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        check_strictly_increasing(&grid, "cdf grid")?;
        if grid.len() < 2 {
            return Err(Error::InvalidGrid(
                "cdf grid needs at least two points".into(),
            ));
        }
        if probs.len() != grid.len() {
            return Err(Error::InvalidValues(format!(
                "cdf has {} grid points but {} probabilities",
                grid.len(),
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(Error::InvalidValues(
                "cdf probabilities must lie in [0, 1]".into(),
            ));
        }
        if probs.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidValues(
                "cdf probabilities must be nondecreasing".into(),
            ));
        }
        let step = uniform_step(&grid);
        Ok(Self { grid, probs, step })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects grids shorter than two points
    }

    /// CDF value at `y`: linear interpolation between knots, flat at the
    /// first/last tabulated probability outside the grid.
    pub fn eval(&self, y: f64) -> f64 {
        assert!(y.is_finite(), "cdf evaluated at non-finite point");
        let n = self.grid.len();
        if y <= self.grid[0] {
            return self.probs[0];
        }
        if y >= self.grid[n - 1] {
            return self.probs[n - 1];
        }
        let i = match self.step {
            Some(h) => {
                let k = ((y - self.grid[0]) / h) as usize;
                // rounding can land one cell off; nudge to the bracketing cell
                let mut k = k.min(n - 2);
                if y < self.grid[k] {
                    k -= 1;
                } else if y >= self.grid[k + 1] {
                    k += 1;
                }
                k
            }
            None => match self.grid.partition_point(|g| *g <= y) {
                0 => 0,
                p => p - 1,
            },
        };
        let (g0, g1) = (self.grid[i], self.grid[i + 1]);
        let (p0, p1) = (self.probs[i], self.probs[i + 1]);
        p0 + (p1 - p0) * (y - g0) / (g1 - g0)
    }

    /// Generalized inverse at level `alpha`: the smallest grid-supported `y`
    /// with `F(y) >= alpha` under linear interpolation.
    ///
    /// Returns the value together with a saturation flag; the flag is set
    /// when `alpha` exceeds the largest tabulated probability, in which case
    /// the top of the grid is returned.
    pub fn invert(&self, alpha: f64) -> Result<(f64, bool)> {
        if !(0.0..=1.0).contains(&alpha) || alpha.is_nan() {
            return Err(Error::Domain(format!(
                "quantile level {alpha} outside [0, 1]"
            )));
        }
        let n = self.grid.len();
        if alpha > self.probs[n - 1] {
            return Ok((self.grid[n - 1], true));
        }
        let i = self.probs.partition_point(|p| *p < alpha);
        // i is the first index with probs[i] >= alpha and is <= n-1 here
        if i == 0 || self.probs[i] == alpha {
            return Ok((self.grid[i], false));
        }
        let (p0, p1) = (self.probs[i - 1], self.probs[i]);
        let (g0, g1) = (self.grid[i - 1], self.grid[i]);
        Ok((g0 + (g1 - g0) * (alpha - p0) / (p1 - p0), false))
    }

    /// Tabulate the generalized inverse on the given levels.
    pub fn to_quantile(&self, levels: &[f64]) -> Result<GridQuantile> {
        let mut vals = Vec::with_capacity(levels.len());
        for &a in levels {
            vals.push(self.invert(a)?.0);
        }
        GridQuantile::new(levels.to_vec(), vals)
    }
}

/// A quantile function tabulated on strictly increasing levels in `(0, 1)`.
///
/// Values must be nondecreasing; between knots the function is interpolated
/// linearly and outside the level range it is extended flat.
#[derive(Debug, Clone, PartialEq)]
pub struct GridQuantile {
    levels: Vec<f64>,
    values: Vec<f64>,
}

impl GridQuantile {
    pub fn new(levels: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        check_strictly_increasing(&levels, "quantile levels")?;
        if levels[0] <= 0.0 || levels[levels.len() - 1] >= 1.0 {
            return Err(Error::InvalidGrid(
                "quantile levels must lie strictly inside (0, 1)".into(),
            ));
        }
        if values.len() != levels.len() {
            return Err(Error::InvalidValues(format!(
                "quantile has {} levels but {} values",
                levels.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValues(
                "quantile values must be finite".into(),
            ));
        }
        if values.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidValues(
                "quantile values must be nondecreasing".into(),
            ));
        }
        Ok(Self { levels, values })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Quantile value at level `u`: linear interpolation, flat outside the
    /// tabulated level range (grid-extreme convention for u near 0 or 1).
    pub fn eval(&self, u: f64) -> f64 {
        assert!(!u.is_nan(), "quantile evaluated at NaN level");
        let n = self.levels.len();
        if u <= self.levels[0] {
            return self.values[0];
        }
        if u >= self.levels[n - 1] {
            return self.values[n - 1];
        }
        let i = self.levels.partition_point(|l| *l <= u) - 1;
        let (l0, l1) = (self.levels[i], self.levels[i + 1]);
        let (v0, v1) = (self.values[i], self.values[i + 1]);
        v0 + (v1 - v0) * (u - l0) / (l1 - l0)
    }

    /// Tabulate the CDF implied by this quantile function on `grid`.
    ///
    /// `F(d) = sup { u : Q(u) <= d }`; mass below the first tabulated value
    /// maps to 0 and everything at or above the last value maps to 1.
    pub fn to_cdf(&self, grid: &[f64]) -> Result<GridCdf> {
        check_strictly_increasing(grid, "target cdf grid")?;
        let n = self.levels.len();
        let mut probs = Vec::with_capacity(grid.len());
        for &d in grid {
            let p = if d < self.values[0] {
                0.0
            } else if d >= self.values[n - 1] {
                1.0
            } else {
                // last index whose value is <= d
                let i = self.values.partition_point(|v| *v <= d) - 1;
                if self.values[i + 1] > self.values[i] {
                    let t = (d - self.values[i]) / (self.values[i + 1] - self.values[i]);
                    self.levels[i] + t * (self.levels[i + 1] - self.levels[i])
                } else {
                    self.levels[i]
                }
            };
            probs.push(p.clamp(0.0, 1.0));
        }
        // enforce monotonicity against rounding at value plateaus
        for i in 1..probs.len() {
            if probs[i] < probs[i - 1] {
                probs[i] = probs[i - 1];
            }
        }
        GridCdf::new(grid.to_vec(), probs)
    }
}

/// The three evaluation grids shared by a bounding run: treatment-effect
/// values `delta`, quantile levels `alpha`, and outcome candidates `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalGrid {
    pub delta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub y: Vec<f64>,
}

impl EvalGrid {
    pub fn new(delta: Vec<f64>, alpha: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        check_strictly_increasing(&delta, "delta grid")?;
        check_strictly_increasing(&alpha, "alpha grid")?;
        check_strictly_increasing(&y, "y grid")?;
        if delta.len() < 2 || alpha.len() < 2 || y.len() < 2 {
            return Err(Error::InvalidGrid(
                "evaluation grids need at least two points each".into(),
            ));
        }
        if alpha[0] <= 0.0 || alpha[alpha.len() - 1] >= 1.0 {
            return Err(Error::InvalidGrid(
                "alpha grid must lie strictly inside (0, 1)".into(),
            ));
        }
        Ok(Self { delta, alpha, y })
    }

    /// Uniform grids: `n_delta` points over the delta range, `n_y` points
    /// over the outcome range, and `n_alpha` interior levels `(j+1)/(n+1)`.
    pub fn regular(
        delta_range: (f64, f64),
        n_delta: usize,
        n_alpha: usize,
        y_range: (f64, f64),
        n_y: usize,
    ) -> Result<Self> {
        if n_delta < 2 || n_alpha < 2 || n_y < 2 {
            return Err(Error::InvalidGrid("grids need at least two points".into()));
        }
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo < hi;
        if !range_ok(delta_range) || !range_ok(y_range) {
            return Err(Error::InvalidGrid(
                "grid range must be a finite nonempty interval".into(),
            ));
        }
        let alpha = (0..n_alpha)
            .map(|j| (j + 1) as f64 / (n_alpha + 1) as f64)
            .collect();
        Ok(Self {
            delta: linspace(delta_range.0, delta_range.1, n_delta),
            alpha,
            y: linspace(y_range.0, y_range.1, n_y),
        })
    }

    /// Data-driven grids: the delta range is the hull of achievable
    /// differences `[min y1 - max y0, max y1 - min y0]` and the y range is
    /// the pooled outcome hull, each padded by 10% of its width.
    pub fn from_outcomes(
        y1: &[f64],
        y0: &[f64],
        n_delta: usize,
        n_alpha: usize,
        n_y: usize,
    ) -> Result<Self> {
        if y1.is_empty() || y0.is_empty() {
            return Err(Error::InvalidData(
                "both treatment arms need outcomes to build grids".into(),
            ));
        }
        let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (lo1, hi1) = (min(y1), max(y1));
        let (lo0, hi0) = (min(y0), max(y0));
        let (dlo, dhi) = (lo1 - hi0, hi1 - lo0);
        let dpad = 0.1 * (dhi - dlo).max(1e-6);
        let (ylo, yhi) = (lo1.min(lo0), hi1.max(hi0));
        let ypad = 0.1 * (yhi - ylo).max(1e-6);
        Self::regular(
            (dlo - dpad, dhi + dpad),
            n_delta,
            n_alpha,
            (ylo - ypad, yhi + ypad),
            n_y,
        )
    }
}

fn check_distance_args(f: &[f64], g: &[f64], grid: &[f64]) -> Result<f64> {
    check_strictly_increasing(grid, "quadrature grid")?;
    if grid.len() < 2 {
        return Err(Error::InvalidGrid(
            "quadrature grid needs at least two points".into(),
        ));
    }
    if f.len() != grid.len() || g.len() != grid.len() {
        return Err(Error::InvalidValues(format!(
            "function values ({}, {}) do not match grid length {}",
            f.len(),
            g.len(),
            grid.len()
        )));
    }
    if f.iter().chain(g.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidValues(
            "distance arguments must be finite".into(),
        ));
    }
    // rectangle rule: each of the n points owns an equal share of the span
    Ok((grid[grid.len() - 1] - grid[0]) / grid.len() as f64)
}

/// Integrated squared difference between two CDFs tabulated on `grid`
/// (the CRPS-type distance), by the rectangle rule.
pub fn crps_distance(f: &[f64], g: &[f64], grid: &[f64]) -> Result<f64> {
    let w = check_distance_args(f, g, grid)?;
    Ok(w * f.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
}

/// Integrated squared difference between two quantile functions tabulated on
/// `levels` (the squared-W2-type distance), by the rectangle rule.
pub fn w2_sq_distance(qa: &[f64], qb: &[f64], levels: &[f64]) -> Result<f64> {
    let w = check_distance_args(qa, qb, levels)?;
    Ok(w * qa
        .iter()
        .zip(qb)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>())
}

/// Pool-adjacent-violators: the L2-nearest nondecreasing sequence.
fn pava(raw: &[f64]) -> Vec<f64> {
    // stack of (block mean, block size)
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(raw.len());
    for &v in raw {
        let mut mean = v;
        let mut count = 1usize;
        while let Some(&(m, c)) = blocks.last() {
            if m <= mean {
                break;
            }
            mean = (m * c as f64 + mean * count as f64) / (c + count) as f64;
            count += c;
            blocks.pop();
        }
        blocks.push((mean, count));
    }
    let mut out = Vec::with_capacity(raw.len());
    for (m, c) in blocks {
        out.extend(std::iter::repeat_n(m, c));
    }
    out
}

/// Project raw values onto the set of valid CDF vectors: nondecreasing and
/// clipped to `[0, 1]`. This is the exact L2 projection onto that set.
pub fn project_to_cdf(raw: &[f64]) -> Vec<f64> {
    let mut v = pava(raw);
    for x in &mut v {
        *x = x.clamp(0.0, 1.0);
    }
    debug_assert!(v.windows(2).all(|w| w[1] >= w[0]));
    v
}

/// Project raw values onto the set of valid quantile vectors (nondecreasing,
/// no range constraint).
pub fn project_to_quantile(raw: &[f64]) -> Vec<f64> {
    let v = pava(raw);
    debug_assert!(v.windows(2).all(|w| w[1] >= w[0]));
    v
}
