//! Observational dataset container: covariates, binary treatment, outcome.

use crate::error::{Error, Result};

/// A sample of `n` units with `d` covariates each.
///
/// Covariates are stored row-major (`x[i * d .. (i + 1) * d]` is unit `i`),
/// treatments are 0/1 and outcomes are finite reals; all three are validated
/// at construction. A dataset may additionally carry one cross-fitting fold
/// index per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Vec<f64>,
    a: Vec<u8>,
    y: Vec<f64>,
    dim: usize,
    folds: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(x: Vec<f64>, a: Vec<u8>, y: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidData("covariate dimension is zero".into()));
        }
        let n = a.len();
        if n == 0 {
            return Err(Error::InvalidData("dataset is empty".into()));
        }
        if y.len() != n || x.len() != n * dim {
            return Err(Error::InvalidData(format!(
                "inconsistent dataset shapes: {} treatments, {} outcomes, {} covariate values for dim {}",
                n,
                y.len(),
                x.len(),
                dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite covariate".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite outcome".into()));
        }
        if a.iter().any(|t| *t > 1) {
            return Err(Error::InvalidData("treatment must be 0 or 1".into()));
        }
        Ok(Self {
            x,
            a,
            y,
            dim,
            folds: None,
        })
    }

    /// Attach one fold index per row; indices must lie in `0..n_folds`.
    pub fn with_folds(mut self, folds: Vec<usize>, n_folds: usize) -> Result<Self> {
        if folds.len() != self.n() {
            return Err(Error::InvalidData(format!(
                "{} fold indices for {} rows",
                folds.len(),
                self.n()
            )));
        }
        if n_folds == 0 || folds.iter().any(|f| *f >= n_folds) {
            return Err(Error::InvalidData(format!(
                "fold indices must lie in 0..{n_folds}"
            )));
        }
        self.folds = Some(folds);
        Ok(self)
    }

    pub fn folds(&self) -> Option<&[usize]> {
        self.folds.as_deref()
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn a(&self) -> &[u8] {
        &self.a
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Indices of the units with the given treatment value.
    pub fn arm_indices(&self, arm: u8) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.a[i] == arm).collect()
    }

    /// Outcomes of the units with the given treatment value.
    pub fn arm_outcomes(&self, arm: u8) -> Vec<f64> {
        (0..self.n())
            .filter(|&i| self.a[i] == arm)
            .map(|i| self.y[i])
            .collect()
    }

    /// The subsample at the given row indices, in order. Fold indices are
    /// not carried over; they refer to the original row numbering.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidData("empty row selection".into()));
        }
        let mut x = Vec::with_capacity(rows.len() * self.dim);
        let mut a = Vec::with_capacity(rows.len());
        let mut y = Vec::with_capacity(rows.len());
        for &i in rows {
            if i >= self.n() {
                return Err(Error::InvalidData(format!(
                    "row index {i} out of range for {} rows",
                    self.n()
                )));
            }
            x.extend_from_slice(self.x_row(i));
            a.push(self.a[i]);
            y.push(self.y[i]);
        }
        Self::new(x, a, y, self.dim)
    }
}
