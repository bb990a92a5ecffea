//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A grid or level vector violates its structural invariants
    /// (wrong length, not strictly increasing, non-finite entries, ...).
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    /// CDF/quantile values violate monotonicity or range constraints.
    #[error("invalid distribution values: {0}")]
    InvalidValues(String),

    /// An evaluation argument is outside its legal domain.
    #[error("argument out of domain: {0}")]
    Domain(String),

    /// A candidate set for an optimization was empty.
    #[error("empty candidate set for {0}")]
    EmptyCandidates(&'static str),

    /// Dataset construction or consistency failure.
    #[error("invalid dataset: {0}")]
    InvalidData(String),

    /// A model fit cannot proceed (degenerate arm, too few rows, ...).
    #[error("cannot fit {what}: {why}")]
    UnfitModel { what: &'static str, why: String },

    /// Cross-fitting produced a fold whose training complement is missing
    /// one treatment arm entirely.
    #[error("fold {fold}: training complement has no rows with treatment {arm}")]
    EmptyArmInFold { fold: usize, arm: u8 },

    /// Configuration value outside its legal range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// The requested estimand is not available for this target.
    #[error("unsupported estimand: {0}")]
    UnsupportedEstimand(String),

    /// A verification routine was asked to run below its minimum budget.
    #[error("verification budget too small: {0}")]
    BudgetTooSmall(String),
}
