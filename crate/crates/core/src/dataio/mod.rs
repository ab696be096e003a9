//! Windows, splits, normalization, text featurization and leak-free
//! alignment of timestamped events to patches.

mod align;
mod dataset;
mod embed;
mod files;
mod normalize;
mod store;
mod windows;

pub use align::{align_interventions, NewsSlab};
pub use dataset::{
    AlignedWindow, DataBundle, Embedder, TextMode, TextTransform, WindowDataset, WindowGeometry,
    WindowInput,
};
pub use embed::{cosine, embed_text_hash, fnv1a, l2_normalize, tokenize};
pub use files::{
    read_descriptors_tsv, read_events_tsv, read_series_csv, write_descriptors_tsv,
    write_events_tsv, write_series_csv, Series,
};
pub use normalize::{denormalize, normalize_apply, normalize_fit, NormStats};
pub use store::{text_key, EmbeddingStore, StoreEntry};
pub use windows::{make_windows, split_windows, Split, SplitSpec};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed input: {0}")]
    Format(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("series of length {len} is shorter than the {need} steps a window needs")]
    TooShort { len: usize, need: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A timestamped piece of text describing an intervention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionEvent {
    pub timestamp: i64,
    pub text: String,
    /// Unit-norm embedding; `None` means the event carries no usable vector
    /// and aligns as a null slot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl InterventionEvent {
    pub fn new(timestamp: i64, text: impl Into<String>) -> Self {
        Self {
            timestamp,
            text: text.into(),
            embedding: None,
        }
    }

    pub fn with_embedding(mut self, embedding: Vec<f64>) -> Self {
        self.embedding = Some(embedding);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelDescriptor {
    pub channel_index: usize,
    pub text: String,
    pub embedding: Vec<f64>,
}

impl ChannelDescriptor {
    /// Hash-embeds `text`. Text without tokens gets the zero vector.
    pub fn hashed(channel_index: usize, text: impl Into<String>, dim: usize) -> Self {
        let text = text.into();
        let embedding = embed_text_hash(&text, dim).unwrap_or_else(|| vec![0.0; dim]);
        Self {
            channel_index,
            text,
            embedding,
        }
    }
}

pub fn check_sorted(events: &[InterventionEvent]) -> Result<(), DataError> {
    if let Some(w) = events.windows(2).find(|w| w[1].timestamp < w[0].timestamp) {
        return Err(DataError::Validation(format!(
            "events out of order: {} follows {}",
            w[1].timestamp, w[0].timestamp
        )));
    }
    Ok(())
}
