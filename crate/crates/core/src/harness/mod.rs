//! Experiment orchestration behind the `iatsf` command line: data
//! generation, training, evaluation, bound studies, ablations, what-if
//! runs and attention export. Every command is a function of the config,
//! its seed and the input files.

mod commands;
mod config;
mod data;
mod report;
pub mod studies;
pub mod toy;

pub use commands::{
    cmd_ablate, cmd_attn, cmd_bounds, cmd_eval, cmd_generate, cmd_train, cmd_whatif, AblationCell,
    AblationReport, BoundsOutcome, TrainSummary, WhatIfReport,
};
pub use config::{
    AblationSpec, AttnSpec, BoundsSpec, DatasetSpec, EvalSpec, ExperimentConfig, WhatIfSpec,
};
pub use data::{load_bundle, toy_series, LoadedData};
pub use report::{sha256_file, HorizonMetrics, Manifest, MetricsReport};

use thiserror::Error;

use crate::bounds::BoundsError;
use crate::dataio::DataError;
use crate::dynsys::DynsysError;
use crate::fiats::FiatsError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("model: {0}")]
    Model(String),
    #[error("leak: {0}")]
    Leak(String),
    #[error("bounds: {0}")]
    Bounds(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Data(_) => "data",
            Self::Model(_) => "model",
            Self::Leak(_) => "leak",
            Self::Bounds(_) => "bounds",
            Self::Io(_) => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Model(_) => 4,
            Self::Leak(_) => 5,
            Self::Bounds(_) => 6,
            Self::Io(_) => 7,
        }
    }
}

impl From<DataError> for HarnessError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(m) => Self::Config(m),
            DataError::Io(e) => Self::Io(e),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<DynsysError> for HarnessError {
    fn from(e: DynsysError) -> Self {
        match e {
            DynsysError::Config(m) => Self::Config(m),
            DynsysError::Io(e) => Self::Io(e),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<FiatsError> for HarnessError {
    fn from(e: FiatsError) -> Self {
        match e {
            FiatsError::Config(m) => Self::Config(m),
            FiatsError::Leak(m) => Self::Leak(m),
            FiatsError::Data(d) => d.into(),
            FiatsError::Io(e) => Self::Io(e),
            other => Self::Model(other.to_string()),
        }
    }
}

impl From<BoundsError> for HarnessError {
    fn from(e: BoundsError) -> Self {
        Self::Bounds(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
