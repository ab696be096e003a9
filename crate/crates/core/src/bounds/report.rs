use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

/// Outcome of checking `empirical ⪰ floor` up to a tolerance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloorReport {
    #[serde(with = "rows")]
    pub floor: DMatrix<f64>,
    #[serde(with = "rows")]
    pub empirical: DMatrix<f64>,
    /// Smallest eigenvalue of `empirical − floor`.
    pub gap_min_eig: f64,
    pub tolerance: f64,
    pub verdict: Verdict,
}

impl FloorReport {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn verify_floor(empirical: &DMatrix<f64>, floor: &DMatrix<f64>, tolerance: f64) -> Result<FloorReport> {
    if !empirical.is_square() || empirical.shape() != floor.shape() {
        return Err(dim_err(format!(
            "empirical {:?} vs floor {:?}",
            empirical.shape(),
            floor.shape()
        )));
    }
    let empirical = symmetrize(empirical);
    let floor = symmetrize(floor);
    let gap = SymmetricEigen::new(&empirical - &floor)
        .eigenvalues
        .min();
    let verdict = if gap >= -tolerance {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(FloorReport {
        floor,
        empirical,
        gap_min_eig: gap,
        tolerance,
        verdict,
    })
}

/// Matrices as a list of rows in JSON.
pub(crate) mod rows {
    use nalgebra::DMatrix;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(D::Error::custom("ragged matrix"));
        }
        Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
    }
}
