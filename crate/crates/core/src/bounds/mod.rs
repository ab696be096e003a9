//! Closed-form error floors for forecasters that cannot see some of the
//! inputs driving a system, and least-squares fits to check them against.

mod floors;
mod ols;
mod report;

pub use floors::{
    floor_forecaster, floor_partial_observation, floor_self_stim, floor_self_stim_nonlinear,
    floor_weight_sharing, intervention_reduction, WeightSharingFloor, JACOBIAN_STEP,
};
pub use ols::{
    fit_ols, fit_ols_intervention_aware, fit_ols_self_stim, fit_shared_weight,
    sample_covariance, OlsFit, SharedWeightFit, MAX_CONDITION,
};
pub use report::{symmetrize, verify_floor, FloorReport, Verdict};
pub(crate) use report::rows as matrix_rows;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("design covariance is ill-conditioned (condition number {0:.3e})")]
    IllConditioned(f64),
    #[error("need at least {need} samples, got {have}")]
    TooFewSamples { have: usize, need: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, BoundsError>;

fn dim_err(msg: impl Into<String>) -> BoundsError {
    BoundsError::Dimension(msg.into())
}
