//! The forecaster: a patch encoder over the look-back window, a
//! channel-aware intervention encoder (CASM) that lets each channel's
//! description query the news attached to each future patch, and a
//! causal cross-attention decoder (CAPS) that projects the history
//! latents forward under those per-channel intervention tokens.

mod attention;
mod checkpoint;
mod config;
mod layers;
mod model;
mod train;
mod whatif;

pub use attention::{export_attention, AttentionExport};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_HEADER};
pub use config::FiatsConfig;
pub use model::{AttentionMaps, FiatsModel, ForwardOutput};
pub use train::{evaluate, train, train_resume, EpochRecord, EvalMetrics, TrainOutcome, TrainState};
pub use whatif::{apply_edits, edited_window, predict_what_if, EventEdit};

use thiserror::Error;

use crate::dataio::DataError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum FiatsError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at epoch {epoch}; last finite epoch {last_finite:?}")]
    Diverged {
        epoch: usize,
        last_finite: Option<usize>,
    },
    #[error("edit rejected: {0}")]
    Leak(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FiatsError>;

/// Start offsets of history patches. When the strided grid leaves a tail
/// uncovered, one extra patch is right-aligned to the end of the series.
pub fn patch_starts(len: usize, patch_len: usize, stride: usize) -> Result<Vec<usize>> {
    if patch_len == 0 || stride == 0 {
        return Err(FiatsError::Config("patch_len and stride must be positive".into()));
    }
    if len < patch_len {
        return Err(FiatsError::Shape(format!(
            "look-back {len} shorter than patch length {patch_len}"
        )));
    }
    let mut starts: Vec<usize> = (0..=len - patch_len).step_by(stride).collect();
    if (len - patch_len) % stride != 0 {
        starts.push(len - patch_len);
    }
    Ok(starts)
}

/// Splits a `[L][C]` series into per-channel patches `[C][P][patch_len]`.
pub fn patchify(series: &[Vec<f64>], patch_len: usize, stride: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let starts = patch_starts(series.len(), patch_len, stride)?;
    let c = series.first().map_or(0, Vec::len);
    if series.iter().any(|r| r.len() != c) {
        return Err(FiatsError::Shape("ragged series".into()));
    }
    Ok((0..c)
        .map(|ch| {
            starts
                .iter()
                .map(|&s| series[s..s + patch_len].iter().map(|r| r[ch]).collect())
                .collect()
        })
        .collect())
}
