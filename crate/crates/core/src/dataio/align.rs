use serde::{Deserialize, Serialize};

use super::{check_sorted, DataError, InterventionEvent};

/// Per-patch news embeddings in fixed-size slots.
///
/// `data` is `[patches × slots × dim]`, row-major. Slots without an event
/// are zero with `valid == false`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewsSlab {
    pub patches: usize,
    pub slots: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
    /// Timestamp of the event in each slot.
    pub timestamps: Vec<Option<i64>>,
}

impl NewsSlab {
    pub fn empty(patches: usize, slots: usize, dim: usize) -> Self {
        Self {
            patches,
            slots,
            dim,
            data: vec![0.0; patches * slots * dim],
            valid: vec![false; patches * slots],
            timestamps: vec![None; patches * slots],
        }
    }

    pub fn slot(&self, patch: usize, slot: usize) -> &[f64] {
        let o = (patch * self.slots + slot) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn is_valid(&self, patch: usize, slot: usize) -> bool {
        self.valid[patch * self.slots + slot]
    }

    /// Number of valid slots at `patch`.
    pub fn count(&self, patch: usize) -> usize {
        (0..self.slots).filter(|&s| self.is_valid(patch, s)).count()
    }

    /// Same shape, every slot null.
    pub fn zeroed(&self) -> Self {
        Self::empty(self.patches, self.slots, self.dim)
    }

    pub fn swap_patches(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        let (m, d) = (self.slots, self.dim);
        for s in 0..m {
            for k in 0..d {
                self.data.swap((a * m + s) * d + k, (b * m + s) * d + k);
            }
            self.valid.swap(a * m + s, b * m + s);
            self.timestamps.swap(a * m + s, b * m + s);
        }
    }
}

/// Attaches to each patch the events observed most recently at or before
/// its start time.
///
/// All events sharing the latest qualifying timestamp are candidates; up to
/// `max_slots` of them with distinct text fill the slots, latest in file
/// order first. Events without an embedding align as null.
pub fn align_interventions(
    events: &[InterventionEvent],
    patch_starts: &[i64],
    max_slots: usize,
    dim: usize,
) -> Result<NewsSlab, DataError> {
    check_sorted(events)?;
    if max_slots == 0 {
        return Err(DataError::Config("max_slots must be at least 1".into()));
    }
    let mut slab = NewsSlab::empty(patch_starts.len(), max_slots, dim);
    for (p, &start) in patch_starts.iter().enumerate() {
        let end = events.partition_point(|e| e.timestamp <= start);
        if end == 0 {
            continue;
        }
        let latest = events[end - 1].timestamp;
        let mut seen: Vec<&str> = Vec::new();
        let mut slot = 0;
        for e in events[..end].iter().rev() {
            if e.timestamp != latest || slot == max_slots {
                break;
            }
            if seen.contains(&e.text.as_str()) {
                continue;
            }
            seen.push(&e.text);
            let Some(v) = &e.embedding else { continue };
            if v.len() != dim {
                return Err(DataError::Dimension(format!(
                    "event embedding of length {} where {dim} expected",
                    v.len()
                )));
            }
            let o = (p * max_slots + slot) * dim;
            slab.data[o..o + dim].copy_from_slice(v);
            slab.valid[p * max_slots + slot] = true;
            slab.timestamps[p * max_slots + slot] = Some(e.timestamp);
            slot += 1;
        }
    }
    Ok(slab)
}
