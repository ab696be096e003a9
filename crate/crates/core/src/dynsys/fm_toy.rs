//! Frequency-modulated toy benchmark.
//!
//! A single-channel sinusoid whose frequency jumps at random change points.
//! Every step carries exactly one caption: the ten steps before a change
//! announce it, the five steps after confirm it, all others say the wave is
//! steady. With the captions observed the future is fully determined.

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DynsysError, Trajectory};
use crate::dataio::InterventionEvent;
use crate::rng::{self, streams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FmToyConfig {
    pub n_steps: usize,
    /// Allowed frequencies, in cycles per `time_scale` steps.
    pub frequencies: Vec<f64>,
    /// Steps per unit of frequency; the phase advances by 2π·f/time_scale.
    pub time_scale: f64,
    /// Inclusive bounds on segment length.
    pub segment_length: (usize, usize),
    pub amplitude: f64,
    pub pre_captions: usize,
    pub post_captions: usize,
    pub seed: u64,
}

impl Default for FmToyConfig {
    fn default() -> Self {
        Self {
            n_steps: 30_000,
            frequencies: vec![2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
            time_scale: 100.0,
            segment_length: (40, 160),
            amplitude: 1.0,
            pre_captions: 10,
            post_captions: 5,
            seed: 0,
        }
    }
}

impl FmToyConfig {
    pub fn validate(&self) -> Result<(), DynsysError> {
        let bad = |m: &str| Err(DynsysError::Config(m.to_string()));
        if self.n_steps == 0 {
            return bad("n_steps must be positive");
        }
        if self.frequencies.len() < 2 {
            return bad("at least two frequencies are needed for changes");
        }
        if self.frequencies.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return bad("frequencies must be positive");
        }
        if !(self.time_scale.is_finite() && self.time_scale > 0.0) {
            return bad("time_scale must be positive");
        }
        let (lo, hi) = self.segment_length;
        if lo > hi {
            return bad("segment_length min exceeds max");
        }
        if lo <= self.pre_captions {
            return bad("segment_length min must exceed pre_captions");
        }
        if !(self.amplitude.is_finite() && self.amplitude > 0.0) {
            return bad("amplitude must be positive");
        }
        Ok(())
    }
}

/// One constant-frequency stretch of the signal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub frequency: f64,
    /// Phase at `start`, in [0, 2π).
    pub phase: f64,
}

/// Change points, frequencies and phases of a generated series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FmSchedule {
    pub segments: Vec<Segment>,
    pub amplitude: f64,
    pub time_scale: f64,
    pub pre_captions: usize,
    pub post_captions: usize,
}

pub(crate) fn fmt_freq(f: f64) -> String {
    if f.fract() == 0.0 && f.abs() < 1e15 {
        format!("{}", f as i64)
    } else {
        format!("{f}")
    }
}

pub fn change_caption(freq: f64, steps: usize) -> String {
    format!(
        "Channel 1 will change to frequency {} in {steps} timesteps.",
        fmt_freq(freq)
    )
}

pub fn steady_with_caption(freq: f64) -> String {
    format!(
        "Channel 1 will keep steady with frequency of {}.",
        fmt_freq(freq)
    )
}

pub const STEADY_CAPTION: &str = "The waveform will go steady.";

/// Descriptor text for the single toy channel.
pub const CHANNEL_DESCRIPTION: &str =
    "Channel 1: a sinusoidal waveform whose frequency changes under external intervention.";

impl FmSchedule {
    pub fn n_steps(&self) -> usize {
        self.segments.last().map_or(0, |s| s.start + s.len)
    }

    /// Index of the segment containing step `t`.
    pub fn segment_at(&self, t: usize) -> usize {
        self.segments.partition_point(|s| s.start <= t) - 1
    }

    pub fn value_at(&self, t: usize) -> f64 {
        let s = &self.segments[self.segment_at(t)];
        self.amplitude * (s.phase + TAU * s.frequency * (t - s.start) as f64 / self.time_scale).sin()
    }

    pub fn signal(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_steps());
        for s in &self.segments {
            for k in 0..s.len {
                out.push(
                    self.amplitude
                        * (s.phase + TAU * s.frequency * k as f64 / self.time_scale).sin(),
                );
            }
        }
        out
    }

    /// Caption attached to step `t`. Pre-change announcements win over
    /// post-change confirmations when the two overlap.
    pub fn caption_at(&self, t: usize) -> String {
        let k = self.segment_at(t);
        if let Some(next) = self.segments.get(k + 1) {
            let y = next.start - t;
            if y <= self.pre_captions {
                return change_caption(next.frequency, y);
            }
        }
        let cur = &self.segments[k];
        if k > 0 && t - cur.start < self.post_captions {
            return steady_with_caption(cur.frequency);
        }
        STEADY_CAPTION.to_string()
    }

    pub fn events(&self) -> Vec<InterventionEvent> {
        (0..self.n_steps())
            .map(|t| InterventionEvent::new(t as i64, self.caption_at(t)))
            .collect()
    }

    /// Recomputes phases forward from segment `from` so the signal stays
    /// phase-continuous after an edit.
    fn rephase(&mut self, from: usize) {
        for k in from.max(1)..self.segments.len() {
            let p = self.segments[k - 1];
            let ph = p.phase + TAU * p.frequency * p.len as f64 / self.time_scale;
            self.segments[k].phase = ph.rem_euclid(TAU);
        }
    }

    /// Copy of the schedule with segment `k` switched to `frequency`.
    pub fn with_segment_frequency(&self, k: usize, frequency: f64) -> Result<Self, DynsysError> {
        if k >= self.segments.len() {
            return Err(DynsysError::Config(format!("no segment {k}")));
        }
        if !(frequency.is_finite() && frequency > 0.0) {
            return Err(DynsysError::Config("frequency must be positive".into()));
        }
        let mut out = self.clone();
        out.segments[k].frequency = frequency;
        out.rephase(k + 1);
        Ok(out)
    }

    pub fn to_trajectory(&self) -> Trajectory {
        let sig = self.signal();
        let t = sig.len();
        let states = DMatrix::from_column_slice(t, 1, &sig);
        let draws = (0..t)
            .map(|i| vec![self.segments[self.segment_at(i)].frequency])
            .collect();
        Trajectory {
            observations: states.clone(),
            states,
            intervention_draws: draws,
            events: self.events(),
        }
    }
}

pub fn generate_schedule(config: &FmToyConfig) -> Result<FmSchedule, DynsysError> {
    config.validate()?;
    let mut r = rng::stream(config.seed, streams::FM_TOY);
    let (lo, hi) = config.segment_length;
    let mut segments = Vec::new();
    let mut start = 0;
    let mut freq = *config.frequencies.choose(&mut r).expect("nonempty");
    let mut phase = r.gen_range(0.0..TAU);
    while start < config.n_steps {
        let len = r.gen_range(lo..=hi).min(config.n_steps - start);
        segments.push(Segment {
            start,
            len,
            frequency: freq,
            phase,
        });
        phase = (phase + TAU * freq * len as f64 / config.time_scale).rem_euclid(TAU);
        start += len;
        let others: Vec<f64> = config
            .frequencies
            .iter()
            .copied()
            .filter(|f| *f != freq)
            .collect();
        freq = *others.choose(&mut r).expect("two or more frequencies");
    }
    Ok(FmSchedule {
        segments,
        amplitude: config.amplitude,
        time_scale: config.time_scale,
        pre_captions: config.pre_captions,
        post_captions: config.post_captions,
    })
}

/// Generates the single-channel toy trajectory with one caption per step.
pub fn generate_fm_toy(config: &FmToyConfig) -> Result<(Trajectory, FmSchedule), DynsysError> {
    let schedule = generate_schedule(config)?;
    Ok((schedule.to_trajectory(), schedule))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FmToyConfig {
        FmToyConfig {
            n_steps: 3000,
            seed: 4,
            ..FmToyConfig::default()
        }
    }

    #[test]
    fn caption_templates() {
        assert_eq!(
            change_caption(5.0, 3),
            "Channel 1 will change to frequency 5 in 3 timesteps."
        );
        assert_eq!(
            steady_with_caption(7.0),
            "Channel 1 will keep steady with frequency of 7."
        );
    }

    #[test]
    fn captions_around_change_points() {
        let (traj, sched) = generate_fm_toy(&small()).unwrap();
        assert_eq!(traj.events.len(), 3000);
        let seg = sched.segments[2];
        let c = seg.start;
        assert_eq!(
            traj.events[c - 3].text,
            change_caption(seg.frequency, 3)
        );
        assert_eq!(
            traj.events[c - 10].text,
            change_caption(seg.frequency, 10)
        );
        assert_eq!(traj.events[c].text, steady_with_caption(seg.frequency));
        assert_eq!(traj.events[c + 4].text, steady_with_caption(seg.frequency));
        // min segment length 40 > 10 + 5 so step c+20 is far from any change
        assert_eq!(traj.events[c + 20].text, STEADY_CAPTION);
        assert_eq!(traj.events[0].text, STEADY_CAPTION);
    }

    #[test]
    fn segment_matches_analytic_sinusoid() {
        let (traj, sched) = generate_fm_toy(&small()).unwrap();
        for s in &sched.segments {
            for k in 0..s.len {
                let want = (s.phase + TAU * s.frequency * k as f64 / 100.0).sin();
                assert!((traj.states[(s.start + k, 0)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn phase_continuity_and_bounds() {
        let (traj, sched) = generate_fm_toy(&small()).unwrap();
        assert!(traj.states.iter().all(|v| v.abs() <= 1.0));
        for w in sched.segments.windows(2) {
            let (a, b) = (w[0], w[1]);
            let end = a.phase + TAU * a.frequency * a.len as f64 / 100.0;
            assert!((end.rem_euclid(TAU) - b.phase).abs() < 1e-9);
            assert_ne!(a.frequency, b.frequency);
        }
    }

    #[test]
    fn events_never_ahead_of_their_step() {
        let (traj, _) = generate_fm_toy(&small()).unwrap();
        for (t, e) in traj.events.iter().enumerate() {
            assert_eq!(e.timestamp, t as i64);
        }
        assert!(traj.events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    }

    #[test]
    fn invalid_configs() {
        let mut c = small();
        c.segment_length = (10, 20);
        assert!(c.validate().is_err());
        let mut c = small();
        c.n_steps = 0;
        assert!(c.validate().is_err());
        let mut c = small();
        c.frequencies = vec![1.0, -2.0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn retargeted_schedule_keeps_prefix() {
        let (_, sched) = generate_fm_toy(&small()).unwrap();
        let edited = sched.with_segment_frequency(3, 9.0).unwrap();
        let (a, b) = (sched.signal(), edited.signal());
        let cut = sched.segments[3].start;
        assert_eq!(a[..cut], b[..cut]);
        assert_ne!(a[cut + 5], b[cut + 5]);
        assert_eq!(edited.caption_at(cut - 2), change_caption(9.0, 2));
    }

    #[test]
    fn same_seed_same_series() {
        let (a, _) = generate_fm_toy(&small()).unwrap();
        let (b, _) = generate_fm_toy(&small()).unwrap();
        assert_eq!(a, b);
    }
}
