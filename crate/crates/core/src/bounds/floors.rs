use nalgebra::{DMatrix, DVector, RowDVector};

use super::{dim_err, BoundsError, Result};
use crate::dynsys::Intervention;

/// Central-difference step for Jacobians with respect to the intervention.
pub const JACOBIAN_STEP: f64 = 1e-5;

fn check_intervention(iv: &Intervention, n: Option<usize>) -> Result<()> {
    let p = iv.b.ncols();
    if iv.cov.shape() != (p, p) {
        return Err(dim_err(format!(
            "B has {p} columns but covariance is {:?}",
            iv.cov.shape()
        )));
    }
    if let Some(n) = n {
        if iv.b.nrows() != n {
            return Err(dim_err(format!("B has {} rows, expected {n}", iv.b.nrows())));
        }
    }
    Ok(())
}

/// `B Σ Bᵀ` for one unobserved intervention: what observing it removes
/// from the error covariance.
pub fn intervention_reduction(iv: &Intervention) -> Result<DMatrix<f64>> {
    check_intervention(iv, None)?;
    Ok(&iv.b * &iv.cov * iv.b.transpose())
}

/// `Σ_j B_j Σ_j B_jᵀ`, the covariance floor of any forecaster that sees
/// only the history of a linear system.
pub fn floor_self_stim(interventions: &[Intervention]) -> Result<DMatrix<f64>> {
    let n = interventions
        .first()
        .map(|iv| iv.b.nrows())
        .ok_or_else(|| dim_err("no interventions"))?;
    let mut out = DMatrix::zeros(n, n);
    for iv in interventions {
        check_intervention(iv, Some(n))?;
        out += intervention_reduction(iv)?;
    }
    Ok(out)
}

/// `E_x[J Σ Jᵀ]` with `J = ∂F/∂u` at `(x, mean)`, averaged over the
/// supplied history samples. `F(x, u)` is a black box.
pub fn floor_self_stim_nonlinear<F>(
    system: F,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    history_samples: &[DVector<f64>],
) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    let p = mean.len();
    if cov.shape() != (p, p) {
        return Err(dim_err(format!(
            "mean of length {p} with covariance {:?}",
            cov.shape()
        )));
    }
    if history_samples.is_empty() {
        return Err(BoundsError::TooFewSamples { have: 0, need: 1 });
    }
    let mut acc: Option<DMatrix<f64>> = None;
    for x in history_samples {
        let mut cols = Vec::with_capacity(p);
        for k in 0..p {
            let mut up = mean.clone();
            let mut down = mean.clone();
            up[k] += JACOBIAN_STEP;
            down[k] -= JACOBIAN_STEP;
            let (fu, fd) = (system(x, &up), system(x, &down));
            if fu.len() != fd.len() {
                return Err(dim_err("system output length varies"));
            }
            if fu.iter().chain(fd.iter()).any(|v| !v.is_finite()) {
                return Err(BoundsError::NonFinite("system output".into()));
            }
            cols.push((fu - fd) / (2.0 * JACOBIAN_STEP));
        }
        let jac = DMatrix::from_columns(&cols);
        let term = &jac * cov * jac.transpose();
        match &mut acc {
            Some(a) if a.shape() == term.shape() => *a += term,
            Some(_) => return Err(dim_err("system output length varies")),
            None => acc = Some(term),
        }
    }
    Ok(acc.expect("nonempty") / history_samples.len() as f64)
}

/// `Σ_w + B Σ_Û Bᵀ`: the error of the optimal model when the intervention
/// it consumes comes from an imperfect external forecaster.
pub fn floor_forecaster(
    noise_cov: &DMatrix<f64>,
    b: &DMatrix<f64>,
    forecast_cov: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (n, p) = b.shape();
    if noise_cov.shape() != (n, n) || forecast_cov.shape() != (p, p) {
        return Err(dim_err(format!(
            "Σ_w {:?}, B {:?}, Σ_Û {:?}",
            noise_cov.shape(),
            b.shape(),
            forecast_cov.shape()
        )));
    }
    Ok(noise_cov + b * forecast_cov * b.transpose())
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightSharingFloor {
    /// Trace-optimal shared row.
    pub shared: RowDVector<f64>,
    pub floor: DMatrix<f64>,
}

/// Floor for `k` channels `X_i = C_i Z` all forced through one shared row
/// `c`. The optimum is the mean row; the floor is
/// `(C − 1c) Σ_Z (C − 1c)ᵀ`.
pub fn floor_weight_sharing(
    channel_rows: &DMatrix<f64>,
    state_cov: &DMatrix<f64>,
) -> Result<WeightSharingFloor> {
    let (k, n) = channel_rows.shape();
    if k == 0 {
        return Err(dim_err("no channels"));
    }
    if state_cov.shape() != (n, n) {
        return Err(dim_err(format!(
            "{n} state columns but Σ_Z is {:?}",
            state_cov.shape()
        )));
    }
    let shared = channel_rows.row_mean();
    let mut diff = channel_rows.clone();
    for mut r in diff.row_iter_mut() {
        r -= &shared;
    }
    let floor = &diff * state_cov * diff.transpose();
    Ok(WeightSharingFloor { shared, floor })
}

/// `H (Σ_j B_j Σ_j B_jᵀ) Hᵀ + (H A) Cov(Z̃) (H A)ᵀ` for a system observed
/// through `H`, where `Z̃` is the state component invisible to `H`.
pub fn floor_partial_observation(
    h: &DMatrix<f64>,
    a: &DMatrix<f64>,
    interventions: &[Intervention],
    hidden_cov: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if !a.is_square() || h.ncols() != n || hidden_cov.shape() != (n, n) {
        return Err(dim_err(format!(
            "H {:?}, A {:?}, Cov(Z̃) {:?}",
            h.shape(),
            a.shape(),
            hidden_cov.shape()
        )));
    }
    let mut inner = DMatrix::zeros(n, n);
    for iv in interventions {
        check_intervention(iv, Some(n))?;
        inner += intervention_reduction(iv)?;
    }
    let ha = h * a;
    Ok(h * inner * h.transpose() + &ha * hidden_cov * ha.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::LinearSystemSpec;
    use crate::rng;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
        a.shape() == b.shape() && (a - b).abs().max() <= tol
    }

    #[test]
    fn dual_intervention_floor() {
        let spec = LinearSystemSpec::dual_intervention();
        let f = floor_self_stim(&spec.interventions).unwrap();
        assert!(close(&f, &DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.3])), 1e-15));
        let r = intervention_reduction(&spec.interventions[0]).unwrap();
        assert!(close(&r, &DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.0])), 1e-15));
    }

    #[test]
    fn zero_covariances_give_zero() {
        let ivs = vec![
            Intervention::scalar(&[1.0, 2.0], 3.0, 0.0),
            Intervention::scalar(&[0.5, 0.0], -1.0, 0.0),
        ];
        assert_eq!(floor_self_stim(&ivs).unwrap(), DMatrix::zeros(2, 2));
        assert_eq!(intervention_reduction(&ivs[0]).unwrap(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn additivity_is_exact() {
        let spec = LinearSystemSpec::dual_intervention();
        let all = floor_self_stim(&spec.interventions).unwrap();
        let rest = floor_self_stim(&spec.interventions[1..]).unwrap();
        let red = intervention_reduction(&spec.interventions[0]).unwrap();
        assert_eq!(all - rest, red);
    }

    #[test]
    fn mismatched_dimensions_rejected() {
        let ivs = vec![
            Intervention::scalar(&[1.0, 0.0], 0.0, 1.0),
            Intervention::scalar(&[1.0, 0.0, 0.0], 0.0, 1.0),
        ];
        assert!(floor_self_stim(&ivs).is_err());
        let bad = Intervention::new(DMatrix::zeros(2, 2), DVector::zeros(2), DMatrix::zeros(3, 3));
        assert!(intervention_reduction(&bad).is_err());
    }

    // Sample covariance of Σ_j B_j u_j, drawn independently of the closed form.
    #[test]
    fn random_floor_matches_sample_covariance() {
        let mut r = rng::stream(11, 0);
        let n = 3;
        let mut ivs = Vec::new();
        for p in [1usize, 2] {
            let b = DMatrix::from_fn(n, p, |_, _| r.gen_range(-1.0..1.0));
            let l = DMatrix::from_fn(p, p, |_, _| r.gen_range(-1.0..1.0));
            ivs.push(Intervention::new(b, DVector::zeros(p), &l * l.transpose()));
        }
        let draws = 1_000_000;
        let mut acc = DMatrix::<f64>::zeros(n, n);
        let chols: Vec<_> = ivs
            .iter()
            .map(|iv| crate::dynsys::psd_factor(&iv.cov).unwrap())
            .collect();
        for _ in 0..draws {
            let mut x = DVector::<f64>::zeros(n);
            for (iv, l) in ivs.iter().zip(&chols) {
                let z = DVector::from_fn(iv.b.ncols(), |_, _| r.sample::<f64, _>(StandardNormal));
                x += &iv.b * (l * z);
            }
            acc += &x * x.transpose();
        }
        let mc = acc / draws as f64;
        let f = floor_self_stim(&ivs).unwrap();
        let rel = (&mc - &f).norm() / f.norm();
        assert!(rel < 0.01, "relative error {rel}");
    }

    #[test]
    fn nonlinear_floor_cases() {
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 2.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
        let mean = DVector::from_vec(vec![0.3, -1.0]);
        let xs: Vec<_> = (0..5).map(|i| DVector::from_vec(vec![i as f64, 1.0])).collect();
        let lin = floor_self_stim_nonlinear(|x, u| x * 0.8 + &b * u, &mean, &cov, &xs).unwrap();
        assert!(close(&lin, &(&b * &cov * b.transpose()), 1e-8));

        let konst = floor_self_stim_nonlinear(|x, _| x.clone(), &mean, &cov, &xs).unwrap();
        assert!(close(&konst, &DMatrix::zeros(2, 2), 1e-12));

        let bvec = DVector::from_vec(vec![1.0, 0.0]);
        let s2 = 0.5;
        let sin = floor_self_stim_nonlinear(
            |_, u| &bvec * u[0].sin(),
            &DVector::zeros(1),
            &DMatrix::from_element(1, 1, s2),
            &xs,
        )
        .unwrap();
        assert!(close(&sin, &(&bvec * bvec.transpose() * s2), 1e-9));

        assert!(matches!(
            floor_self_stim_nonlinear(|_, _| DVector::from_element(1, f64::NAN), &mean, &cov, &xs),
            Err(BoundsError::NonFinite(_))
        ));
    }

    #[test]
    fn forecaster_floor() {
        let half = DMatrix::<f64>::identity(2, 2) * 0.5;
        let f = floor_forecaster(&DMatrix::zeros(2, 2), &DMatrix::identity(2, 2), &half).unwrap();
        assert_eq!(f, half);
        let w = DMatrix::from_row_slice(2, 2, &[0.2, 0.05, 0.05, 0.1]);
        let f = floor_forecaster(&w, &DMatrix::identity(2, 2), &DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(f, w);
        assert!(floor_forecaster(&w, &DMatrix::identity(2, 3), &half).is_err());
    }

    #[test]
    fn two_channel_weight_sharing() {
        let v = 2.0;
        let c = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let w = floor_weight_sharing(&c, &DMatrix::from_element(1, 1, v)).unwrap();
        assert!((w.shared[0] - 1.5).abs() < 1e-15);
        // residuals are -0.5 Z and +0.5 Z, so the off-diagonal is negative
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]) * (v / 4.0);
        assert!(close(&w.floor, &expected, 1e-15));
    }

    #[test]
    fn identical_rows_share_without_loss() {
        let c = DMatrix::from_row_slice(3, 2, &[0.4, -1.0, 0.4, -1.0, 0.4, -1.0]);
        let w = floor_weight_sharing(&c, &DMatrix::identity(2, 2)).unwrap();
        assert!(close(&w.floor, &DMatrix::zeros(3, 3), 1e-15));
    }

    fn trace_loss(c: &DMatrix<f64>, sz: &DMatrix<f64>, row: &RowDVector<f64>) -> f64 {
        let mut diff = c.clone();
        for mut r in diff.row_iter_mut() {
            r -= row;
        }
        (&diff * sz * diff.transpose()).trace()
    }

    // Oracle: minimize the trace numerically by gradient descent with
    // finite-difference gradients.
    #[test]
    fn shared_row_minimizes_trace() {
        let mut r = rng::stream(5, 1);
        for _ in 0..5 {
            let (k, n) = (4, 3);
            let c = DMatrix::from_fn(k, n, |_, _| r.gen_range(-2.0..2.0));
            let l = DMatrix::from_fn(n, n, |_, _| r.gen_range(-1.0..1.0));
            let sz = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
            let lmax = SymmetricEigen::new(sz.clone()).eigenvalues.max();
            let step = 1.0 / (2.0 * k as f64 * lmax);
            let mut row = RowDVector::zeros(n);
            for _ in 0..20_000 {
                let mut g = RowDVector::zeros(n);
                for j in 0..n {
                    let mut up = row.clone();
                    let mut dn = row.clone();
                    up[j] += 1e-6;
                    dn[j] -= 1e-6;
                    g[j] = (trace_loss(&c, &sz, &up) - trace_loss(&c, &sz, &dn)) / 2e-6;
                }
                row -= g * step;
            }
            let w = floor_weight_sharing(&c, &sz).unwrap();
            assert!((&w.shared - &row).abs().max() < 1e-6);
        }
    }

    #[test]
    fn partial_observation_cases() {
        let spec = LinearSystemSpec::dual_intervention();
        let id = DMatrix::<f64>::identity(2, 2);
        let full = floor_partial_observation(&id, &spec.a, &spec.interventions, &DMatrix::zeros(2, 2))
            .unwrap();
        assert_eq!(full, floor_self_stim(&spec.interventions).unwrap());

        let a = DMatrix::from_row_slice(2, 2, &[0.8, 0.5, 0.0, 0.8]);
        let hid = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let no_b = floor_partial_observation(&h, &a, &[], &hid).unwrap();
        let ha = &h * &a;
        assert!(close(&no_b, &(&ha * &hid * ha.transpose()), 1e-15));

        let f = floor_partial_observation(&h, &spec.a, &spec.interventions, &hid).unwrap();
        assert!((f[(0, 0)] - 0.5).abs() < 1e-15);
        assert!(floor_partial_observation(&h, &a, &[], &DMatrix::zeros(1, 1)).is_err());
    }

    proptest! {
        #[test]
        fn floors_are_psd(seed in 0u64..500, n in 1usize..5, k in 1usize..4) {
            let mut r = rng::stream(seed, 2);
            let ivs: Vec<_> = (0..k).map(|_| {
                let p = r.gen_range(1..4);
                let b = DMatrix::from_fn(n, p, |_, _| r.gen_range(-2.0..2.0));
                let l = DMatrix::from_fn(p, p, |_, _| r.gen_range(-1.0..1.0));
                Intervention::new(b, DVector::zeros(p), &l * l.transpose())
            }).collect();
            let f = floor_self_stim(&ivs).unwrap();
            prop_assert!(SymmetricEigen::new(f.clone()).eigenvalues.min() >= -1e-10);
            let sum = ivs.iter().map(|iv| intervention_reduction(iv).unwrap()).fold(DMatrix::zeros(n, n), |a, b| a + b);
            prop_assert!((&f - sum).abs().max() < 1e-12);
            let c = DMatrix::from_fn(k, n, |_, _| r.gen_range(-2.0..2.0));
            let w = floor_weight_sharing(&c, &(f.clone() + DMatrix::identity(n, n))).unwrap();
            prop_assert!(SymmetricEigen::new(w.floor).eigenvalues.min() >= -1e-10);
        }
    }
}
