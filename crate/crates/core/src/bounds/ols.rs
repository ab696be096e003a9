use nalgebra::{DMatrix, DVector, RowDVector, SymmetricEigen};

use super::{dim_err, BoundsError, Result};

/// Largest accepted condition number of the regressor covariance.
pub const MAX_CONDITION: f64 = 1e10;

/// Affine least-squares fit `ŷ = coef·x + intercept`.
#[derive(Clone, Debug, PartialEq)]
pub struct OlsFit {
    /// `[d×p]`.
    pub coef: DMatrix<f64>,
    pub intercept: DVector<f64>,
    /// Population covariance of the in-sample residuals, `[d×d]`.
    pub residual_cov: DMatrix<f64>,
    pub samples: usize,
}

impl OlsFit {
    /// Predictions for each row of `x`.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.coef.ncols() {
            return Err(dim_err(format!(
                "fit expects {} regressors, got {}",
                self.coef.ncols(),
                x.ncols()
            )));
        }
        let mut y = x * self.coef.transpose();
        for mut r in y.row_iter_mut() {
            r += self.intercept.transpose();
        }
        Ok(y)
    }
}

/// Population (1/N) covariance of the rows of `m`.
pub fn sample_covariance(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows().max(1) as f64;
    let c = centered(m).0;
    c.transpose() * &c / n
}

fn centered(m: &DMatrix<f64>) -> (DMatrix<f64>, RowDVector<f64>) {
    let mean = m.row_mean();
    let mut c = m.clone();
    for mut r in c.row_iter_mut() {
        r -= &mean;
    }
    (c, mean)
}

/// Least squares of `y` on `x` with intercept, via normal equations on
/// centered data and a Cholesky solve. Rows are samples.
pub fn fit_ols(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<OlsFit> {
    let (n, p) = x.shape();
    if y.nrows() != n {
        return Err(dim_err(format!("{n} regressor rows but {} target rows", y.nrows())));
    }
    if n < p + 1 {
        return Err(BoundsError::TooFewSamples { have: n, need: p + 1 });
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(BoundsError::NonFinite("regression data".into()));
    }
    let (xc, xmean) = centered(x);
    let (yc, ymean) = centered(y);
    let sxx = xc.transpose() * &xc / n as f64;
    let sxy = xc.transpose() * &yc / n as f64;

    let eig = SymmetricEigen::new(sxx.clone()).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(cond <= MAX_CONDITION) {
        return Err(BoundsError::IllConditioned(cond));
    }
    let chol = sxx.cholesky().ok_or(BoundsError::IllConditioned(cond))?;
    let coef = chol.solve(&sxy).transpose();
    let intercept = (ymean - xmean * coef.transpose()).transpose();

    let resid = yc - xc * coef.transpose();
    let residual_cov = resid.transpose() * &resid / n as f64;
    Ok(OlsFit {
        coef,
        intercept,
        residual_cov: super::symmetrize(&residual_cov),
        samples: n,
    })
}

/// History-only forecaster `X̂_f = C X_h + d`.
pub fn fit_ols_self_stim(history: &DMatrix<f64>, future: &DMatrix<f64>) -> Result<OlsFit> {
    fit_ols(history, future)
}

/// Forecaster that also regresses on the observed interventions; the
/// coefficient columns are `[X_h, U_1, U_2, ...]` in the order given.
pub fn fit_ols_intervention_aware(
    history: &DMatrix<f64>,
    observed: &[&DMatrix<f64>],
    future: &DMatrix<f64>,
) -> Result<OlsFit> {
    let n = history.nrows();
    if let Some(u) = observed.iter().find(|u| u.nrows() != n) {
        return Err(dim_err(format!(
            "intervention with {} rows next to {n} history rows",
            u.nrows()
        )));
    }
    let p = history.ncols() + observed.iter().map(|u| u.ncols()).sum::<usize>();
    let mut design = DMatrix::zeros(n, p);
    design.columns_mut(0, history.ncols()).copy_from(history);
    let mut col = history.ncols();
    for u in observed {
        design.columns_mut(col, u.ncols()).copy_from(*u);
        col += u.ncols();
    }
    fit_ols(&design, future)
}

/// One row `c` (and intercept) shared by every output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedWeightFit {
    pub shared: RowDVector<f64>,
    pub intercept: f64,
    pub residual_cov: DMatrix<f64>,
}

/// Minimizes total squared error of `X_f,i ≈ c·Z + b` over all channels
/// `i` with a single `(c, b)`, which is the regression of the channel
/// average on `Z`.
pub fn fit_shared_weight(states: &DMatrix<f64>, future: &DMatrix<f64>) -> Result<SharedWeightFit> {
    let k = future.ncols();
    if k == 0 {
        return Err(dim_err("no output channels"));
    }
    let avg = DMatrix::from_column_slice(future.nrows(), 1, future.column_mean().as_slice());
    let fit = fit_ols(states, &avg)?;
    let shared = fit.coef.row(0).into_owned();
    let intercept = fit.intercept[0];
    let pred = states * shared.transpose();
    let mut resid = future.clone();
    for j in 0..k {
        for i in 0..resid.nrows() {
            resid[(i, j)] -= pred[i] + intercept;
        }
    }
    Ok(SharedWeightFit {
        shared,
        intercept,
        residual_cov: super::symmetrize(&sample_covariance(&resid)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::{simulate_linear, Intervention, LinearSystemSpec};
    use crate::rng;
    use rand::Rng;

    #[test]
    fn recovers_dual_intervention_dynamics() {
        let data = simulate_linear(&LinearSystemSpec::dual_intervention(), 200_000, 3).unwrap();
        let fit = fit_ols_self_stim(&data.history, &data.future).unwrap();
        let a = DMatrix::<f64>::identity(2, 2) * 0.8;
        assert!((&fit.coef - a).abs().max() <= 0.01, "{}", fit.coef);
        assert!(fit.intercept.abs().max() <= 0.01);
    }

    #[test]
    fn noiseless_system_is_exact() {
        let spec = LinearSystemSpec::new(
            DMatrix::from_row_slice(2, 2, &[0.5, -0.2, 0.1, 0.9]),
            vec![Intervention::scalar(&[1.0, 0.5], 1.5, 0.0)],
        );
        let data = simulate_linear(&spec, 500, 1).unwrap();
        let fit = fit_ols_self_stim(&data.history, &data.future).unwrap();
        assert!((&fit.coef - &spec.a).abs().max() < 1e-10);
        assert!((fit.intercept[0] - 1.5).abs() < 1e-10 && (fit.intercept[1] - 0.75).abs() < 1e-10);
        assert!(fit.residual_cov.abs().max() < 1e-10);
    }

    #[test]
    fn intercept_is_b_times_mean() {
        let spec = LinearSystemSpec::new(
            DMatrix::identity(2, 2) * 0.8,
            vec![
                Intervention::scalar(&[1.0, 0.0], 2.0, 0.5),
                Intervention::scalar(&[0.0, 1.0], 0.0, 0.3),
            ],
        );
        let data = simulate_linear(&spec, 200_000, 8).unwrap();
        let fit = fit_ols_self_stim(&data.history, &data.future).unwrap();
        assert!((fit.intercept[0] - 2.0).abs() < 0.01 && fit.intercept[1].abs() < 0.01);
    }

    #[test]
    fn fully_observed_interventions_leave_no_error() {
        let spec = LinearSystemSpec::dual_intervention();
        let data = simulate_linear(&spec, 200_000, 4).unwrap();
        let us: Vec<&DMatrix<f64>> = data.interventions.iter().collect();
        let fit = fit_ols_intervention_aware(&data.history, &us, &data.future).unwrap();
        assert!(fit.residual_cov.abs().max() <= 1e-3);
    }

    // Independent route: SVD least squares on the design with a ones column.
    #[test]
    fn matches_svd_least_squares() {
        let mut r = rng::stream(9, 0);
        let (n, p, d) = (300, 3, 2);
        let x = DMatrix::from_fn(n, p, |_, _| r.gen_range(-1.0..1.0));
        let y = DMatrix::from_fn(n, d, |i, j| x[(i, 0)] * (j as f64 + 1.0) - x[(i, 2)] + r.gen_range(-0.1..0.1));
        let mut design = DMatrix::from_element(n, p + 1, 1.0);
        design.columns_mut(0, p).copy_from(&x);
        let beta = design.clone().svd(true, true).solve(&y, 1e-14).unwrap();
        let fit = fit_ols(&x, &y).unwrap();
        assert!((fit.coef.transpose() - beta.rows(0, p)).abs().max() < 1e-10);
        assert!((fit.intercept.transpose() - beta.row(p)).abs().max() < 1e-10);
        let resid = &y - &design * &beta;
        assert!((fit.residual_cov - resid.transpose() * &resid / n as f64).abs().max() < 1e-10);
    }

    #[test]
    fn singular_design_rejected() {
        let x = DMatrix::from_fn(50, 2, |i, _| i as f64);
        let y = DMatrix::from_fn(50, 1, |i, _| i as f64);
        assert!(matches!(fit_ols(&x, &y), Err(BoundsError::IllConditioned(_))));
        assert!(matches!(
            fit_ols(&DMatrix::zeros(2, 2), &DMatrix::zeros(2, 1)),
            Err(BoundsError::TooFewSamples { .. })
        ));
        assert!(fit_ols(&DMatrix::zeros(5, 1), &DMatrix::zeros(4, 1)).is_err());
    }

    #[test]
    fn shared_weight_two_channels() {
        let mut r = rng::stream(2, 0);
        let n = 50_000;
        let z = DMatrix::from_fn(n, 1, |_, _| r.gen_range(-1.0..1.0));
        let y = DMatrix::from_fn(n, 2, |i, j| z[i] * (j as f64 + 1.0));
        let fit = fit_shared_weight(&z, &y).unwrap();
        assert!((fit.shared[0] - 1.5).abs() < 1e-10);
        let v = sample_covariance(&z)[(0, 0)];
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]) * (v / 4.0);
        assert!((fit.residual_cov - expected).abs().max() < 1e-10);
    }
}
