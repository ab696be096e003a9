use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::DynsysError;
use crate::rng::{self, streams};

/// Largest diagonal jitter accepted when factoring a covariance.
pub const MAX_JITTER: f64 = 1e-10;

/// One intervention channel `B_j U_j` with `U_j ~ N(μ_j, Σ_j)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub b: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Intervention {
    pub fn new(b: DMatrix<f64>, mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { b, mean, cov }
    }

    /// Scalar intervention entering through column `b`.
    pub fn scalar(b: &[f64], mean: f64, var: f64) -> Self {
        Self {
            b: DMatrix::from_column_slice(b.len(), 1, b),
            mean: DVector::from_element(1, mean),
            cov: DMatrix::from_element(1, 1, var),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Distribution of the history state `X_h`, drawn independently of every
/// intervention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryDistribution {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl HistoryDistribution {
    pub fn standard(n: usize) -> Self {
        Self {
            mean: DVector::zeros(n),
            cov: DMatrix::identity(n, n),
        }
    }
}

/// `X_f = A X_h + Σ_j B_j U_j + w`, with optional observation map `H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSystemSpec {
    pub a: DMatrix<f64>,
    pub interventions: Vec<Intervention>,
    pub noise_cov: DMatrix<f64>,
    pub observation: Option<DMatrix<f64>>,
    pub history: HistoryDistribution,
}

impl LinearSystemSpec {
    pub fn new(a: DMatrix<f64>, interventions: Vec<Intervention>) -> Self {
        let n = a.nrows();
        Self {
            a,
            interventions,
            noise_cov: DMatrix::zeros(n, n),
            observation: None,
            history: HistoryDistribution::standard(n),
        }
    }

    pub fn with_noise(mut self, noise_cov: DMatrix<f64>) -> Self {
        self.noise_cov = noise_cov;
        self
    }

    pub fn with_observation(mut self, h: DMatrix<f64>) -> Self {
        self.observation = Some(h);
        self
    }

    pub fn with_history(mut self, history: HistoryDistribution) -> Self {
        self.history = history;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    /// The dual-intervention system: `A = 0.8 I₂`, `B₁ = e₁`, `B₂ = e₂`,
    /// `σ₁² = 0.5`, `σ₂² = 0.3`, zero means, no process noise.
    pub fn dual_intervention() -> Self {
        Self::new(
            DMatrix::identity(2, 2) * 0.8,
            vec![
                Intervention::scalar(&[1.0, 0.0], 0.0, 0.5),
                Intervention::scalar(&[0.0, 1.0], 0.0, 0.3),
            ],
        )
    }

    pub fn validate(&self) -> Result<(), DynsysError> {
        let n = self.state_dim();
        if self.a.ncols() != n {
            return Err(DynsysError::Dimension(format!(
                "A must be square, got {}x{}",
                n,
                self.a.ncols()
            )));
        }
        for (j, iv) in self.interventions.iter().enumerate() {
            let p = iv.dim();
            if iv.b.nrows() != n || iv.b.ncols() != p || iv.cov.shape() != (p, p) {
                return Err(DynsysError::Dimension(format!(
                    "intervention {j}: B {:?}, mean {p}, cov {:?}",
                    iv.b.shape(),
                    iv.cov.shape()
                )));
            }
            psd_factor(&iv.cov).map_err(|e| e.context(format!("intervention {j} covariance")))?;
        }
        if self.noise_cov.shape() != (n, n) {
            return Err(DynsysError::Dimension("process-noise covariance".into()));
        }
        psd_factor(&self.noise_cov).map_err(|e| e.context("process-noise covariance"))?;
        if self.history.mean.len() != n || self.history.cov.shape() != (n, n) {
            return Err(DynsysError::Dimension("history distribution".into()));
        }
        psd_factor(&self.history.cov).map_err(|e| e.context("history covariance"))?;
        if let Some(h) = &self.observation {
            if h.ncols() != n || h.nrows() > n {
                return Err(DynsysError::Dimension(format!(
                    "observation matrix {:?} for state dim {n}",
                    h.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Lower-triangular factor `L` with `L Lᵀ ≈ Σ`. Zero matrices factor to
/// zero exactly; otherwise a diagonal jitter up to [`MAX_JITTER`] is allowed.
pub fn psd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>, DynsysError> {
    let n = cov.nrows();
    if cov.ncols() != n {
        return Err(DynsysError::Dimension("covariance must be square".into()));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(DynsysError::NotPsd("non-finite entry".into()));
    }
    let asym = (cov - cov.transpose()).amax();
    if asym > 1e-12 * cov.amax().max(1.0) {
        return Err(DynsysError::NotPsd(format!("asymmetric by {asym:e}")));
    }
    if cov.iter().all(|v| *v == 0.0) {
        return Ok(DMatrix::zeros(n, n));
    }
    for jitter in [0.0, 1e-12, 1e-11, MAX_JITTER] {
        let m = cov + DMatrix::identity(n, n) * jitter;
        if let Some(ch) = m.cholesky() {
            return Ok(ch.l());
        }
    }
    Err(DynsysError::NotPsd(
        "Cholesky failed with jitter up to 1e-10".into(),
    ))
}

/// Samples drawn from a [`LinearSystemSpec`]; row `i` of every matrix is
/// sample `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearDataset {
    pub history: DMatrix<f64>,
    pub interventions: Vec<DMatrix<f64>>,
    pub future: DMatrix<f64>,
}

impl LinearDataset {
    pub fn len(&self) -> usize {
        self.history.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.history.nrows() == 0
    }

    /// Applies `H` to history and future states.
    pub fn observed(&self, h: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), DynsysError> {
        Ok((observe(&self.history, h)?, observe(&self.future, h)?))
    }
}

fn gaussian_rows<R: Rng>(
    rng: &mut R,
    n: usize,
    mean: &DVector<f64>,
    factor: &DMatrix<f64>,
) -> DMatrix<f64> {
    let p = mean.len();
    let z = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut out = z * factor.transpose();
    for mut row in out.row_iter_mut() {
        row += mean.transpose();
    }
    out
}

/// Draws `n_samples` i.i.d. triples `(X_h, {U_j}, X_f)`.
pub fn simulate_linear(
    spec: &LinearSystemSpec,
    n_samples: usize,
    seed: u64,
) -> Result<LinearDataset, DynsysError> {
    spec.validate()?;
    if n_samples == 0 {
        return Err(DynsysError::Config("n_samples must be positive".into()));
    }
    let n = spec.state_dim();
    let mut hist_rng = rng::stream(seed, streams::LINEAR_HISTORY);
    let history = gaussian_rows(
        &mut hist_rng,
        n_samples,
        &spec.history.mean,
        &psd_factor(&spec.history.cov)?,
    );
    let mut future = &history * spec.a.transpose();
    let mut interventions = Vec::with_capacity(spec.interventions.len());
    for (j, iv) in spec.interventions.iter().enumerate() {
        let mut r = rng::stream(seed, rng::substream(streams::LINEAR_INTERVENTION, j as u64));
        let u = gaussian_rows(&mut r, n_samples, &iv.mean, &psd_factor(&iv.cov)?);
        future += &u * iv.b.transpose();
        interventions.push(u);
    }
    let noise_factor = psd_factor(&spec.noise_cov)?;
    if noise_factor.iter().any(|v| *v != 0.0) {
        let mut r = rng::stream(seed, streams::LINEAR_NOISE);
        future += gaussian_rows(&mut r, n_samples, &DVector::zeros(n), &noise_factor);
    }
    Ok(LinearDataset {
        history,
        interventions,
        future,
    })
}

/// Row-wise projection `X = Z Hᵀ` of a `[T×n]` state matrix.
pub fn observe(states: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<DMatrix<f64>, DynsysError> {
    if h.ncols() != states.ncols() {
        return Err(DynsysError::Dimension(format!(
            "H has {} columns but states have dimension {}",
            h.ncols(),
            states.ncols()
        )));
    }
    Ok(states * h.transpose())
}

/// Component of each state row outside the observable subspace,
/// `Z̃ = Z − H⁺ H Z`.
pub fn hidden_component(
    states: &DMatrix<f64>,
    h: &DMatrix<f64>,
) -> Result<DMatrix<f64>, DynsysError> {
    let pinv = h
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| DynsysError::Dimension(e.to_string()))?;
    let obs = observe(states, h)?;
    Ok(states - obs * pinv.transpose())
}
