//! Small numeric helpers shared across modules.

use statrs::distribution::ContinuousCDF;
use statrs::distribution::Normal;
use std::sync::LazyLock;

static STD_NORMAL: LazyLock<Normal> = LazyLock::new(|| Normal::new(0.0, 1.0).expect("unit normal"));

/// Standard normal CDF.
pub fn norm_cdf(z: f64) -> f64 {
    STD_NORMAL.cdf(z)
}

/// Standard normal quantile function. `p` must lie in (0, 1).
pub fn norm_quantile(p: f64) -> f64 {
    STD_NORMAL.inverse_cdf(p)
}

/// Standard normal density.
pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `n` evenly spaced points from `lo` to `hi` inclusive. Requires `n >= 2`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2, "linspace needs at least two points");
    let step = (hi - lo) / (n - 1) as f64;
    let mut out: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
    // force exact endpoints; accumulated rounding must not leak into grids
    out[0] = lo;
    out[n - 1] = hi;
    out
}

/// Sample mean.
pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation with `n - 1` denominator.
pub fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    let ss: f64 = v.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (v.len() - 1) as f64).sqrt()
}
