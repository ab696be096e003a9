use serde::{Deserialize, Serialize};

use super::{FiatsError, FiatsModel, Result};
use crate::dataio::{AlignedWindow, InterventionEvent, WindowDataset};

/// A change to the future event list of one window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EventEdit {
    /// Drops every event at `timestamp` and inserts `text` there.
    Replace { timestamp: i64, text: String },
    /// Adds an event next to any existing ones.
    Insert { timestamp: i64, text: String },
    Remove { timestamp: i64 },
    /// Exchanges the event sets at two timestamps.
    Swap { a: i64, b: i64 },
}

impl EventEdit {
    fn timestamps(&self) -> Vec<i64> {
        match self {
            Self::Replace { timestamp, .. } | Self::Insert { timestamp, .. } | Self::Remove { timestamp } => {
                vec![*timestamp]
            }
            Self::Swap { a, b } => vec![*a, *b],
        }
    }
}

/// Applies `edits` in order to a copy of `events`. Every edited timestamp
/// must lie in `[forecast_start, forecast_end]`.
pub fn apply_edits(
    events: &[InterventionEvent],
    edits: &[EventEdit],
    forecast_start: i64,
    forecast_end: i64,
) -> Result<Vec<InterventionEvent>> {
    for e in edits {
        for ts in e.timestamps() {
            if ts < forecast_start {
                return Err(FiatsError::Leak(format!(
                    "timestamp {ts} precedes the forecast start {forecast_start}"
                )));
            }
            if ts > forecast_end {
                return Err(FiatsError::Leak(format!(
                    "timestamp {ts} lies past the forecast end {forecast_end}"
                )));
            }
        }
    }
    let mut out: Vec<InterventionEvent> = events.iter().map(|e| InterventionEvent::new(e.timestamp, e.text.clone())).collect();
    for e in edits {
        match e {
            EventEdit::Replace { timestamp, text } => {
                out.retain(|x| x.timestamp != *timestamp);
                out.push(InterventionEvent::new(*timestamp, text.clone()));
            }
            EventEdit::Insert { timestamp, text } => out.push(InterventionEvent::new(*timestamp, text.clone())),
            EventEdit::Remove { timestamp } => out.retain(|x| x.timestamp != *timestamp),
            EventEdit::Swap { a, b } => {
                for x in out.iter_mut() {
                    if x.timestamp == *a {
                        x.timestamp = *b;
                    } else if x.timestamp == *b {
                        x.timestamp = *a;
                    }
                }
            }
        }
        out.sort_by_key(|x| x.timestamp);
    }
    Ok(out)
}

/// Window `index` of `ds` re-aligned against the edited event list.
pub fn edited_window(ds: &WindowDataset, index: usize, edits: &[EventEdit]) -> Result<AlignedWindow> {
    let base = ds.window(index)?;
    if edits.is_empty() {
        return Ok(base);
    }
    let g = ds.geometry();
    let end = ds.timestamps()[base.start + g.lookback + g.horizon - 1];
    let events = apply_edits(ds.events(), edits, base.forecast_time, end)?;
    let events = ds.embed_events(events)?;
    Ok(ds.window_with_events(index, &events)?)
}

/// Forecast `[H][C]` for window `index` under edited future events.
pub fn predict_what_if(
    model: &FiatsModel,
    ds: &WindowDataset,
    index: usize,
    edits: &[EventEdit],
) -> Result<Vec<Vec<f64>>> {
    let w = edited_window(ds, index, edits)?;
    model.forward(&w.input)
}
