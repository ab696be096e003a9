//! System generators: linear interventional systems, partial observation,
//! and the frequency-modulated toy benchmark.

mod fm_toy;
mod linear;

pub use fm_toy::{
    change_caption, generate_fm_toy, generate_schedule, steady_with_caption, FmSchedule,
    FmToyConfig, Segment, CHANNEL_DESCRIPTION, STEADY_CAPTION,
};
pub use linear::{
    hidden_component, observe, psd_factor, simulate_linear, HistoryDistribution, Intervention,
    LinearDataset, LinearSystemSpec, MAX_JITTER,
};

use std::io::Write;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::dataio::InterventionEvent;

#[derive(Debug, Error)]
pub enum DynsysError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("covariance is not positive semidefinite: {0}")]
    NotPsd(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DynsysError {
    fn context(self, what: impl std::fmt::Display) -> Self {
        match self {
            Self::NotPsd(m) => Self::NotPsd(format!("{what}: {m}")),
            Self::Dimension(m) => Self::Dimension(format!("{what}: {m}")),
            other => other,
        }
    }
}

/// A simulated run: hidden states, what was observed, the realized
/// interventions per step, and timestamped intervention events.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: DMatrix<f64>,
    pub observations: DMatrix<f64>,
    pub intervention_draws: Vec<Vec<f64>>,
    pub events: Vec<InterventionEvent>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    /// Observations as row vectors (`[T][C]`).
    pub fn observation_rows(&self) -> Vec<Vec<f64>> {
        self.observations
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }

    /// Writes `timestamp,ch0,ch1,...` with integer step timestamps.
    pub fn write_series_csv<W: Write>(&self, w: W) -> Result<(), DynsysError> {
        crate::dataio::write_series_csv(w, &self.observation_rows(), None)
            .map_err(|e| DynsysError::Io(std::io::Error::other(e.to_string())))
    }

    /// Writes `timestamp<TAB>text`, one event per line.
    pub fn write_events_tsv<W: Write>(&self, w: W) -> Result<(), DynsysError> {
        crate::dataio::write_events_tsv(w, &self.events)
            .map_err(|e| DynsysError::Io(std::io::Error::other(e.to_string())))
    }
}
