//! Sharp bounds on the conditional distribution of treatment effects.
//!
//! Individual treatment effects `Y(1) - Y(0)` are never observed jointly, so
//! their conditional distribution is only partially identified. Given the two
//! conditional outcome distributions, the tightest pointwise envelope on
//! `P(Y(1) - Y(0) <= delta | X = x)` is obtained from sup/inf convolutions of
//! the marginal CDFs (Makarov bounds). This crate estimates those envelopes
//! from observational data:
//!
//! * [`grid`] - grid-backed CDF/quantile representations, CRPS and squared-W2
//!   distances, and isotonic projections used everywhere else;
//! * [`makarov`] - the bound computations themselves (continuous, discrete and
//!   mixed-type versions, plus closed forms for equal-variance normals);
//! * [`nuisance`] - propensity and conditional-outcome models with K-fold
//!   cross-fitting;
//! * [`learners`] - plug-in, IPTW and two-stage pseudo-outcome learners (the
//!   corrected pseudo-outcomes interpolate between a plain conditional-average
//!   regression and a Neyman-orthogonal one);
//! * [`bench`] - synthetic data generators with known ground truth, metrics,
//!   and numerical verification tools (coupling enumeration, orthogonality
//!   probe, Monte Carlo enclosure checks).

pub mod bench;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod learners;
pub mod makarov;
pub mod nuisance;
pub(crate) mod stats;

pub use dataset::Dataset;
pub use error::{Error, Result};
pub use grid::{EvalGrid, GridCdf, GridQuantile};
pub use makarov::{BoundsPair, EstimandKind};
