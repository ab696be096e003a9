use std::collections::HashMap;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    align_interventions, check_sorted, embed_text_hash, fnv1a, l2_normalize, normalize_apply,
    normalize_fit, split_windows, DataError, EmbeddingStore, InterventionEvent, NewsSlab,
    NormStats, Series, Split, SplitSpec,
};
use crate::rng::{self, streams};

/// How event texts turn into vectors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextMode {
    /// Featurized text.
    #[default]
    Good,
    /// Every event becomes a null slot.
    Zero,
    /// A fresh unit-norm Gaussian vector per event, unrelated to the text.
    Random,
}

impl std::str::FromStr for TextMode {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "good" => Ok(Self::Good),
            "zero" => Ok(Self::Zero),
            "random" => Ok(Self::Random),
            _ => Err(DataError::Config(format!("unknown text mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TextTransform {
    pub mode: TextMode,
    /// Std of the Gaussian perturbation, relative to a unit vector.
    pub noise_sigma: f64,
    pub zero_desc: bool,
    pub seed: u64,
}

impl TextTransform {
    pub fn good(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn with_mode(mut self, mode: TextMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn with_zero_desc(mut self, on: bool) -> Self {
        self.zero_desc = on;
        self
    }
}

/// Turns texts into vectors under a [`TextTransform`].
#[derive(Clone, Debug)]
pub struct Embedder {
    dim: usize,
    store: Option<Arc<EmbeddingStore>>,
    transform: TextTransform,
}

impl Embedder {
    pub fn new(dim: usize, store: Option<Arc<EmbeddingStore>>, transform: TextTransform) -> Self {
        Self {
            dim,
            store,
            transform,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn transform(&self) -> TextTransform {
        self.transform
    }

    fn featurize(&self, text: &str) -> Option<Vec<f64>> {
        match &self.store {
            Some(s) => s.lookup_or_hash(text),
            None => embed_text_hash(text, self.dim),
        }
    }

    fn event_rng(&self, stream: u64, timestamp: i64, text: &str) -> rng::StreamRng {
        let key = fnv1a(format!("{timestamp}\t{text}").as_bytes());
        rng::stream(self.transform.seed ^ key, stream)
    }

    fn gaussian(&self, r: &mut rng::StreamRng) -> Vec<f64> {
        (0..self.dim).map(|_| StandardNormal.sample(r)).collect()
    }

    /// Embedding for an event, given the featurized text (so callers can
    /// cache featurization by text).
    fn finish(&self, timestamp: i64, text: &str, base: Option<Vec<f64>>) -> Option<Vec<f64>> {
        match self.transform.mode {
            TextMode::Zero => None,
            TextMode::Random => {
                base.as_ref()?;
                let mut r = self.event_rng(streams::TEXT_RANDOM, timestamp, text);
                let mut v = self.gaussian(&mut r);
                l2_normalize(&mut v);
                Some(v)
            }
            TextMode::Good => {
                let mut v = base?;
                let sigma = self.transform.noise_sigma;
                if sigma > 0.0 {
                    let mut r = self.event_rng(streams::TEXT_NOISE, timestamp, text);
                    let scale = sigma / (self.dim as f64).sqrt();
                    for (x, g) in v.iter_mut().zip(self.gaussian(&mut r)) {
                        *x += scale * g;
                    }
                    l2_normalize(&mut v);
                }
                Some(v)
            }
        }
    }

    pub fn embed_event(&self, timestamp: i64, text: &str) -> Option<Vec<f64>> {
        self.finish(timestamp, text, self.featurize(text))
    }

    /// Embeds every event in place.
    pub fn embed_events(&self, events: &mut [InterventionEvent]) {
        let mut cache: HashMap<String, Option<Vec<f64>>> = HashMap::new();
        for e in events.iter_mut() {
            let base = cache
                .entry(e.text.clone())
                .or_insert_with(|| self.featurize(&e.text))
                .clone();
            e.embedding = self.finish(e.timestamp, &e.text, base);
        }
    }

    pub fn embed_descriptor(&self, text: &str) -> Vec<f64> {
        if self.transform.zero_desc {
            return vec![0.0; self.dim];
        }
        self.featurize(text).unwrap_or_else(|| vec![0.0; self.dim])
    }
}

/// Row offsets of history patches and future output patches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowGeometry {
    pub lookback: usize,
    pub horizon: usize,
    /// Start of each history patch, relative to the window's first row.
    pub history_patch_offsets: Vec<usize>,
    /// Start of each future patch, relative to the first forecast row.
    pub future_patch_offsets: Vec<usize>,
    pub max_slots: usize,
}

impl WindowGeometry {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.lookback == 0 || self.horizon == 0 || self.max_slots == 0 {
            return Err(DataError::Config(
                "lookback, horizon and max_slots must be positive".into(),
            ));
        }
        if self.history_patch_offsets.iter().any(|o| *o >= self.lookback)
            || self.future_patch_offsets.iter().any(|o| *o >= self.horizon)
        {
            return Err(DataError::Config("patch offset outside its segment".into()));
        }
        if self.future_patch_offsets.first() != Some(&0) {
            return Err(DataError::Config("the first future patch must start at 0".into()));
        }
        Ok(())
    }

    /// Index of the future patch containing forecast step `h`.
    pub fn future_patch_of(&self, h: usize) -> usize {
        self.future_patch_offsets.partition_point(|o| *o <= h) - 1
    }
}

/// Everything the forecaster may look at for one window. The future
/// target is deliberately absent.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowInput {
    /// `[L][C]`, normalized.
    pub x_h: Vec<Vec<f64>>,
    /// `[C][D]`.
    pub desc: Vec<Vec<f64>>,
    pub news_future: NewsSlab,
    pub news_history: NewsSlab,
}

impl WindowInput {
    pub fn channels(&self) -> usize {
        self.desc.len()
    }

    pub fn lookback(&self) -> usize {
        self.x_h.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedWindow {
    /// Row index of the first history step.
    pub start: usize,
    /// Timestamp of the first forecast step.
    pub forecast_time: i64,
    pub input: WindowInput,
    /// `[H][C]`, normalized with the same statistics as `x_h`.
    pub x_f: Vec<Vec<f64>>,
    pub norm: NormStats,
}

/// Lazily materialized windows over one split.
#[derive(Clone, Debug)]
pub struct WindowDataset {
    rows: Arc<Vec<Vec<f64>>>,
    timestamps: Arc<Vec<i64>>,
    events: Arc<Vec<InterventionEvent>>,
    desc: Arc<Vec<Vec<f64>>>,
    geometry: WindowGeometry,
    starts: Vec<usize>,
    norm: NormStats,
    embedder: Embedder,
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn geometry(&self) -> &WindowGeometry {
        &self.geometry
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn events(&self) -> &[InterventionEvent] {
        &self.events
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn channels(&self) -> usize {
        self.desc.len()
    }

    pub fn window(&self, i: usize) -> Result<AlignedWindow, DataError> {
        let s = *self
            .starts
            .get(i)
            .ok_or_else(|| DataError::Config(format!("window {i} out of range ({})", self.len())))?;
        self.window_at(s, &self.events)
    }

    /// Window `i` aligned against a different event list.
    pub fn window_with_events(
        &self,
        i: usize,
        events: &[InterventionEvent],
    ) -> Result<AlignedWindow, DataError> {
        let s = *self
            .starts
            .get(i)
            .ok_or_else(|| DataError::Config(format!("window {i} out of range ({})", self.len())))?;
        self.window_at(s, events)
    }

    fn window_at(&self, s: usize, events: &[InterventionEvent]) -> Result<AlignedWindow, DataError> {
        let g = &self.geometry;
        let f0 = s + g.lookback;
        let hist_starts: Vec<i64> = g
            .history_patch_offsets
            .iter()
            .map(|o| self.timestamps[s + o])
            .collect();
        let fut_starts: Vec<i64> = g
            .future_patch_offsets
            .iter()
            .map(|o| self.timestamps[f0 + o])
            .collect();
        let dim = self.embedder.dim();
        Ok(AlignedWindow {
            start: s,
            forecast_time: self.timestamps[f0],
            input: WindowInput {
                x_h: self.rows[s..f0].to_vec(),
                desc: self.desc.to_vec(),
                news_future: align_interventions(events, &fut_starts, g.max_slots, dim)?,
                news_history: align_interventions(events, &hist_starts, g.max_slots, dim)?,
            },
            x_f: self.rows[f0..f0 + g.horizon].to_vec(),
            norm: self.norm.clone(),
        })
    }

    /// Sorted copy of the event list with embeddings under this dataset's
    /// text transform.
    pub fn embed_events(&self, mut events: Vec<InterventionEvent>) -> Result<Vec<InterventionEvent>, DataError> {
        events.sort_by_key(|e| e.timestamp);
        self.embedder.embed_events(&mut events);
        Ok(events)
    }
}

/// A series with its events and channel descriptors, normalized with
/// training-split statistics.
#[derive(Clone, Debug)]
pub struct DataBundle {
    rows: Arc<Vec<Vec<f64>>>,
    timestamps: Arc<Vec<i64>>,
    events: Vec<InterventionEvent>,
    descriptors: Vec<String>,
    norm: NormStats,
    split: SplitSpec,
    dim: usize,
    store: Option<Arc<EmbeddingStore>>,
}

impl DataBundle {
    pub fn new(
        series: &Series,
        events: Vec<InterventionEvent>,
        descriptors: Vec<String>,
        dim: usize,
        split: SplitSpec,
    ) -> Result<Self, DataError> {
        check_sorted(&events)?;
        if descriptors.len() != series.channels() {
            return Err(DataError::Dimension(format!(
                "{} descriptors for {} channels",
                descriptors.len(),
                series.channels()
            )));
        }
        if dim < 16 {
            return Err(DataError::Config("embedding dimension must be at least 16".into()));
        }
        let train = split.range(series.len(), Split::Train)?;
        if train.is_empty() {
            return Err(DataError::TooShort {
                len: series.len(),
                need: 1,
            });
        }
        let norm = normalize_fit(&series.rows[train])?;
        let rows = normalize_apply(&series.rows, &norm)?;
        Ok(Self {
            rows: Arc::new(rows),
            timestamps: Arc::new(series.timestamps.clone()),
            events,
            descriptors,
            norm,
            split,
            dim,
            store: None,
        })
    }

    pub fn with_store(mut self, store: EmbeddingStore) -> Result<Self, DataError> {
        if store.dim() != self.dim {
            return Err(DataError::Dimension(format!(
                "store dimension {} but bundle uses {}",
                store.dim(),
                self.dim
            )));
        }
        self.store = Some(Arc::new(store));
        Ok(self)
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.descriptors.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn normalized_rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn embedder(&self, transform: TextTransform) -> Embedder {
        Embedder::new(self.dim, self.store.clone(), transform)
    }

    pub fn dataset(
        &self,
        split: Split,
        geometry: &WindowGeometry,
        stride: usize,
        transform: TextTransform,
    ) -> Result<WindowDataset, DataError> {
        geometry.validate()?;
        let starts = split_windows(
            self.rows.len(),
            geometry.lookback,
            geometry.horizon,
            stride,
            &self.split,
            split,
        )?;
        let embedder = self.embedder(transform);
        let mut events = self.events.clone();
        embedder.embed_events(&mut events);
        let desc = self
            .descriptors
            .iter()
            .map(|t| embedder.embed_descriptor(t))
            .collect();
        Ok(WindowDataset {
            rows: Arc::clone(&self.rows),
            timestamps: Arc::clone(&self.timestamps),
            events: Arc::new(events),
            desc: Arc::new(desc),
            geometry: geometry.clone(),
            starts,
            norm: self.norm.clone(),
            embedder,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle() -> DataBundle {
        let n = 400;
        let series = Series {
            channel_names: vec!["a".into(), "b".into()],
            timestamps: (0..n as i64).map(|t| 10 * t).collect(),
            rows: (0..n).map(|t| vec![t as f64, (t as f64 * 0.1).sin()]).collect(),
        };
        let events = (0..n as i64)
            .step_by(7)
            .map(|t| InterventionEvent::new(10 * t, format!("event number {}", t % 3)))
            .collect();
        DataBundle::new(&series, events, vec!["first".into(), "second".into()], 32, SplitSpec::default())
            .unwrap()
    }

    fn geometry() -> WindowGeometry {
        WindowGeometry {
            lookback: 20,
            horizon: 8,
            history_patch_offsets: vec![0, 8, 12],
            future_patch_offsets: vec![0, 4],
            max_slots: 2,
        }
    }

    #[test]
    fn windows_are_leak_free_and_in_split() {
        let b = bundle();
        let ds = b.dataset(Split::Val, &geometry(), 1, TextTransform::good(1)).unwrap();
        assert!(!ds.is_empty());
        for i in 0..ds.len() {
            let w = ds.window(i).unwrap();
            assert!(w.start >= 280 && w.start + 28 <= 320);
            assert_eq!(w.input.x_h.len(), 20);
            assert_eq!(w.x_f.len(), 8);
            assert_eq!(w.x_f[0], b.normalized_rows()[w.start + 20]);
            for (p, o) in geometry().future_patch_offsets.iter().enumerate() {
                let start = ds.timestamps()[w.start + 20 + o];
                for k in 0..2 {
                    if let Some(t) = w.input.news_future.timestamps[p * 2 + k] {
                        assert!(t <= start);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_mode_nulls_every_slot() {
        let b = bundle();
        let t = TextTransform::good(1).with_mode(TextMode::Zero).with_zero_desc(true);
        let ds = b.dataset(Split::Train, &geometry(), 5, t).unwrap();
        let w = ds.window(3).unwrap();
        assert!(w.input.news_future.valid.iter().all(|v| !v));
        assert!(w.input.news_future.data.iter().all(|v| *v == 0.0));
        assert!(w.input.desc.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn random_and_noise_modes() {
        let b = bundle();
        let good = b.embedder(TextTransform::good(4));
        let random = b.embedder(TextTransform::good(4).with_mode(TextMode::Random));
        let noisy = b.embedder(TextTransform::good(4).with_noise(0.5));
        let g = good.embed_event(70, "event number 1").unwrap();
        let r1 = random.embed_event(70, "event number 1").unwrap();
        let r2 = random.embed_event(140, "event number 1").unwrap();
        let n1 = noisy.embed_event(70, "event number 1").unwrap();
        assert_ne!(r1, r2);
        assert_eq!(r1, random.embed_event(70, "event number 1").unwrap());
        for v in [&r1, &r2, &n1] {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        let c = super::super::cosine(&g, &n1);
        assert!(c < 1.0 && c > 0.5, "{c}");
    }

    #[test]
    fn train_split_normalized() {
        let b = bundle();
        let tr = &b.normalized_rows()[..280];
        let m: f64 = tr.iter().map(|r| r[0]).sum::<f64>() / 280.0;
        assert!(m.abs() < 1e-10);
    }
}
