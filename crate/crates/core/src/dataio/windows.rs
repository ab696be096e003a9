use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(DataError::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// Chronological train/val/test fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(DataError::Config("split fractions must be nonnegative".into()));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::Config("split fractions must sum to 1".into()));
        }
        Ok(())
    }

    /// Contiguous index ranges for a series of length `len`.
    pub fn ranges(&self, len: usize) -> Result<[Range<usize>; 3], DataError> {
        self.validate()?;
        let a = (self.train * len as f64).round() as usize;
        let b = ((self.train + self.val) * len as f64).round() as usize;
        Ok([0..a, a..b.min(len), b.min(len)..len])
    }

    pub fn range(&self, len: usize, split: Split) -> Result<Range<usize>, DataError> {
        let r = self.ranges(len)?;
        Ok(match split {
            Split::Train => r[0].clone(),
            Split::Val => r[1].clone(),
            Split::Test => r[2].clone(),
        })
    }
}

/// Start offsets of sliding windows: history `[s, s+L)`, future `[s+L, s+L+H)`.
pub fn make_windows(
    len: usize,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<usize>, DataError> {
    if stride == 0 || lookback == 0 || horizon == 0 {
        return Err(DataError::Config(
            "lookback, horizon and stride must be positive".into(),
        ));
    }
    let need = lookback + horizon;
    if len < need {
        return Err(DataError::TooShort { len, need });
    }
    Ok((0..=len - need).step_by(stride).collect())
}

/// Absolute window starts for one split; every window lies entirely
/// inside the split's range.
pub fn split_windows(
    len: usize,
    lookback: usize,
    horizon: usize,
    stride: usize,
    spec: &SplitSpec,
    split: Split,
) -> Result<Vec<usize>, DataError> {
    let r = spec.range(len, split)?;
    let local = make_windows(r.len(), lookback, horizon, stride)?;
    Ok(local.into_iter().map(|s| s + r.start).collect())
}
