use serde::{Deserialize, Serialize};

use super::DataError;

/// Per-channel z-scoring statistics, fit on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, rows: &[Vec<f64>]) -> Result<(), DataError> {
        if let Some(r) = rows.iter().find(|r| r.len() != self.channels()) {
            return Err(DataError::Dimension(format!(
                "stats for {} channels applied to a row of {}",
                self.channels(),
                r.len()
            )));
        }
        Ok(())
    }
}

/// Fits mean and (population) std per channel over `rows`. A channel with
/// zero spread gets std 1.
pub fn normalize_fit(rows: &[Vec<f64>]) -> Result<NormStats, DataError> {
    let c = rows
        .first()
        .map(Vec::len)
        .ok_or_else(|| DataError::Config("cannot fit normalization on no rows".into()))?;
    if rows.iter().any(|r| r.len() != c) {
        return Err(DataError::Dimension("ragged series rows".into()));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; c];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut std = vec![0.0; c];
    for r in rows {
        for j in 0..c {
            std[j] += (r[j] - mean[j]).powi(2);
        }
    }
    for (j, s) in std.iter_mut().enumerate() {
        *s = (*s / n).sqrt();
        if !(*s > 1e-12) {
            log::warn!("channel {j} has zero variance; clamping std to 1");
            *s = 1.0;
        }
    }
    Ok(NormStats { mean, std })
}

pub fn normalize_apply(rows: &[Vec<f64>], stats: &NormStats) -> Result<Vec<Vec<f64>>, DataError> {
    stats.check(rows)?;
    Ok(rows
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - stats.mean[j]) / stats.std[j])
                .collect()
        })
        .collect())
}

pub fn denormalize(rows: &[Vec<f64>], stats: &NormStats) -> Result<Vec<Vec<f64>>, DataError> {
    stats.check(rows)?;
    Ok(rows
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(j, v)| v * stats.std[j] + stats.mean[j])
                .collect()
        })
        .collect())
}
