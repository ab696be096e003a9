//! Monte Carlo studies behind the built-in bound presets.

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::bounds::{
    fit_ols_intervention_aware, fit_ols_self_stim, fit_shared_weight, floor_forecaster,
    floor_partial_observation, floor_self_stim, floor_weight_sharing, intervention_reduction,
    matrix_rows, sample_covariance, symmetrize, verify_floor, FloorReport,
};
use crate::dynsys::{hidden_component, simulate_linear, Intervention, LinearSystemSpec};
use crate::rng::{self, streams};

/// Tolerance used for Monte Carlo floor checks: `scale / √N · ‖floor‖_F`.
pub fn mc_tolerance(floor: &DMatrix<f64>, samples: usize, scale: f64) -> f64 {
    scale / (samples as f64).sqrt() * floor.norm().max(1e-12)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DualInterventionStudy {
    pub samples: usize,
    #[serde(with = "matrix_rows")]
    pub self_stim_cov: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub aware_cov: DMatrix<f64>,
    /// `B₁Σ₁B₁ᵀ`: what observing `U₁` should remove.
    #[serde(with = "matrix_rows")]
    pub reduction: DMatrix<f64>,
    pub self_stim: FloorReport,
    pub aware: FloorReport,
}

/// Dual-intervention system; the aware forecaster observes `U₁` only.
pub fn dual_intervention(samples: usize, seed: u64) -> Result<DualInterventionStudy> {
    let spec = LinearSystemSpec::dual_intervention();
    let data = simulate_linear(&spec, samples, seed)?;
    let plain = fit_ols_self_stim(&data.history, &data.future)?;
    let aware = fit_ols_intervention_aware(&data.history, &[&data.interventions[0]], &data.future)?;
    let floor_plain = floor_self_stim(&spec.interventions)?;
    let floor_aware = floor_self_stim(&spec.interventions[1..])?;
    Ok(DualInterventionStudy {
        samples,
        self_stim_cov: plain.residual_cov.clone(),
        aware_cov: aware.residual_cov.clone(),
        reduction: intervention_reduction(&spec.interventions[0])?,
        self_stim: verify_floor(&plain.residual_cov, &floor_plain, mc_tolerance(&floor_plain, samples, 5.0))?,
        aware: verify_floor(&aware.residual_cov, &floor_aware, mc_tolerance(&floor_plain, samples, 5.0))?,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeightSharingStudy {
    pub samples: usize,
    /// Fitted shared coefficient on the latent state.
    pub shared: f64,
    pub state_var: f64,
    #[serde(with = "matrix_rows")]
    pub residual_cov: DMatrix<f64>,
    /// Closed form `(C − 1c)Σ(C − 1c)ᵀ`.
    #[serde(with = "matrix_rows")]
    pub floor: DMatrix<f64>,
    pub report: FloorReport,
}

/// Two channels `X₁ = Z`, `X₂ = 2Z` forced through one shared weight.
pub fn weight_sharing(samples: usize, seed: u64) -> Result<WeightSharingStudy> {
    if samples < 3 {
        return Err(HarnessError::Config("weight sharing study needs at least 3 samples".into()));
    }
    let mut r = rng::stream(seed, streams::LINEAR_HISTORY);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let z = DMatrix::from_fn(samples, 1, |_, _| normal.sample(&mut r));
    let channels = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
    let future = &z * channels.transpose();
    let fit = fit_shared_weight(&z, &future)?;
    let state_var = sample_covariance(&z)[(0, 0)];
    let floor = floor_weight_sharing(&channels, &DMatrix::from_element(1, 1, state_var))?.floor;
    let report = verify_floor(&fit.residual_cov, &floor, mc_tolerance(&floor, samples, 5.0))?;
    Ok(WeightSharingStudy {
        samples,
        shared: fit.shared[0],
        state_var,
        residual_cov: fit.residual_cov,
        floor,
        report,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForecasterNoiseStudy {
    pub samples: usize,
    #[serde(with = "matrix_rows")]
    pub error_cov: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub floor: DMatrix<f64>,
    pub report: FloorReport,
}

/// A perfect linear model of the dual-intervention system fed forecast
/// interventions `Û = U + ε` with `Cov(ε) = forecast_var · I`.
pub fn forecaster_noise(samples: usize, forecast_var: f64, seed: u64) -> Result<ForecasterNoiseStudy> {
    let spec = LinearSystemSpec::dual_intervention();
    let data = simulate_linear(&spec, samples, seed)?;
    let n = spec.state_dim();
    let normal = Normal::new(0.0, forecast_var.sqrt())
        .map_err(|e| HarnessError::Config(format!("forecast variance: {e}")))?;
    let mut pred = &data.history * spec.a.transpose();
    let mut b_all = DMatrix::zeros(n, 0);
    for (j, (iv, u)) in spec.interventions.iter().zip(&data.interventions).enumerate() {
        let mut r = rng::stream(seed, rng::substream(streams::FORECASTER_NOISE, j as u64));
        let noisy = u.map(|v| v + normal.sample(&mut r));
        pred += &noisy * iv.b.transpose();
        b_all = concat_cols(&b_all, &iv.b);
    }
    let error_cov = symmetrize(&sample_covariance(&(&data.future - pred)));
    let p = b_all.ncols();
    let floor = floor_forecaster(&spec.noise_cov, &b_all, &(DMatrix::identity(p, p) * forecast_var))?;
    let report = verify_floor(&error_cov, &floor, mc_tolerance(&floor, samples, 5.0))?;
    Ok(ForecasterNoiseStudy {
        samples,
        error_cov,
        floor,
        report,
    })
}

fn concat_cols(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(b.nrows(), a.ncols() + b.ncols());
    if a.ncols() > 0 {
        out.columns_mut(0, a.ncols()).copy_from(a);
    }
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PartialObservationStudy {
    pub samples: usize,
    #[serde(with = "matrix_rows")]
    pub residual_cov: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub floor: DMatrix<f64>,
    pub report: FloorReport,
}

/// Two-state system observed through `H = [1, 0]`; the hidden state feeds
/// the observed one through `A`.
pub fn partial_observation(samples: usize, seed: u64) -> Result<PartialObservationStudy> {
    let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let spec = LinearSystemSpec::new(
        DMatrix::from_row_slice(2, 2, &[0.8, 0.5, 0.0, 0.6]),
        vec![
            Intervention::scalar(&[1.0, 0.0], 0.0, 0.5),
            Intervention::scalar(&[0.0, 1.0], 0.0, 0.3),
        ],
    )
    .with_observation(h.clone());
    let data = simulate_linear(&spec, samples, seed)?;
    let (xh, xf) = data.observed(&h)?;
    let fit = fit_ols_self_stim(&xh, &xf)?;
    let hidden = sample_covariance(&hidden_component(&data.history, &h)?);
    let floor = floor_partial_observation(&h, &spec.a, &spec.interventions, &hidden)?;
    let report = verify_floor(&fit.residual_cov, &floor, mc_tolerance(&floor, samples, 5.0))?;
    Ok(PartialObservationStudy {
        samples,
        residual_cov: fit.residual_cov,
        floor,
        report,
    })
}
