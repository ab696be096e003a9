//! What-if helpers that need the generating schedule of the toy series.

use crate::dynsys::FmSchedule;
use crate::fiats::EventEdit;

use super::Result;

/// A swap of the next two scheduled frequency changes after a forecast
/// start, with the edits that realize it in the caption stream and the
/// schedule that serves as its oracle.
#[derive(Clone, Debug)]
pub struct ToySwap {
    pub edits: Vec<EventEdit>,
    pub schedule: FmSchedule,
    /// Segment whose frequency changes first.
    pub segment: usize,
    /// Horizon step at which the swapped signal starts to differ.
    pub first_step: usize,
}

/// Builds the swap for a window whose forecast starts at step `start`.
/// Returns `None` unless a change falls inside the horizon, at least
/// `min_affected` steps before its end, and the swap actually alters it.
pub fn toy_swap(schedule: &FmSchedule, start: usize, horizon: usize, min_affected: usize) -> Result<Option<ToySwap>> {
    let segs = &schedule.segments;
    let Some(k) = segs.iter().position(|s| s.start > start) else {
        return Ok(None);
    };
    if k + 1 >= segs.len() {
        return Ok(None);
    }
    let change = segs[k].start - start;
    if change + min_affected > horizon {
        return Ok(None);
    }
    let (fa, fb) = (segs[k].frequency, segs[k + 1].frequency);
    if fb == segs[k - 1].frequency {
        return Ok(None);
    }
    let swapped = schedule
        .with_segment_frequency(k, fb)?
        .with_segment_frequency(k + 1, fa)?;
    let end = (start + horizon).min(schedule.n_steps());
    let edits = (start..end)
        .filter_map(|t| {
            let text = swapped.caption_at(t);
            (text != schedule.caption_at(t)).then(|| EventEdit::Replace {
                timestamp: t as i64,
                text,
            })
        })
        .collect();
    Ok(Some(ToySwap {
        edits,
        schedule: swapped,
        segment: k,
        first_step: change,
    }))
}

/// Normalized signal of `schedule` over `[start, start + horizon)`.
pub fn oracle(schedule: &FmSchedule, start: usize, horizon: usize, mean: f64, std: f64) -> Vec<f64> {
    (start..start + horizon)
        .map(|t| (schedule.value_at(t) - mean) / std)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::{generate_schedule, FmToyConfig};

    #[test]
    fn swap_changes_only_the_future() {
        let sched = generate_schedule(&FmToyConfig {
            n_steps: 2000,
            ..FmToyConfig::default()
        })
        .unwrap();
        let mut found = 0;
        for start in (100..1800).step_by(7) {
            let Some(s) = toy_swap(&sched, start, 14, 3).unwrap() else {
                continue;
            };
            found += 1;
            for t in 0..start + s.first_step {
                assert_eq!(s.schedule.value_at(t).to_bits(), sched.value_at(t).to_bits());
            }
            let t = start + s.first_step + 2;
            assert_ne!(s.schedule.value_at(t), sched.value_at(t));
            assert!(!s.edits.is_empty());
            for e in &s.edits {
                let EventEdit::Replace { timestamp, .. } = e else { panic!() };
                assert!(*timestamp >= start as i64 && *timestamp < (start + 14) as i64);
            }
        }
        assert!(found > 5);
    }
}
