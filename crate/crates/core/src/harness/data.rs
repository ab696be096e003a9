use std::fs::File;
use std::io::BufReader;

use super::{DatasetSpec, ExperimentConfig, Result};
use crate::dataio::{
    read_descriptors_tsv, read_events_tsv, read_series_csv, DataBundle, EmbeddingStore,
    InterventionEvent, Series, Split, WindowDataset,
};
use crate::dynsys::{generate_fm_toy, FmSchedule, FmToyConfig, CHANNEL_DESCRIPTION};

/// A series with its events, descriptors and, for the toy, the schedule
/// that generated it.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub series: Series,
    pub events: Vec<InterventionEvent>,
    pub descriptors: Vec<String>,
    pub schedule: Option<FmSchedule>,
    pub bundle: DataBundle,
}

impl LoadedData {
    pub fn dataset(&self, cfg: &ExperimentConfig, split: Split, horizon: usize, train: bool) -> Result<WindowDataset> {
        let geo = cfg.model.geometry(cfg.lookback, horizon)?;
        let (stride, transform) = if train {
            (cfg.train_stride, cfg.train_transform())
        } else {
            (cfg.eval_stride, cfg.test_transform())
        };
        Ok(self.bundle.dataset(split, &geo, stride, transform)?)
    }
}

/// Generates the toy series with integer step timestamps.
pub fn toy_series(toy: &FmToyConfig) -> Result<(Series, Vec<InterventionEvent>, Vec<String>, FmSchedule)> {
    let (traj, schedule) = generate_fm_toy(toy)?;
    let rows = traj.observation_rows();
    let series = Series {
        channel_names: vec!["channel_1".into()],
        timestamps: (0..rows.len() as i64).collect(),
        rows,
    };
    Ok((series, traj.events, vec![CHANNEL_DESCRIPTION.to_string()], schedule))
}

pub fn load_bundle(cfg: &ExperimentConfig) -> Result<LoadedData> {
    let dim = cfg.model.embed_dim;
    match &cfg.dataset {
        DatasetSpec::Toy { toy } => {
            let (series, events, descriptors, schedule) = toy_series(toy)?;
            let bundle = DataBundle::new(&series, events.clone(), descriptors.clone(), dim, cfg.split)?;
            Ok(LoadedData {
                series,
                events,
                descriptors,
                schedule: Some(schedule),
                bundle,
            })
        }
        DatasetSpec::Files {
            series,
            events,
            descriptors,
            store,
        } => {
            let series = read_series_csv(BufReader::new(File::open(series)?))?;
            let mut events = read_events_tsv(BufReader::new(File::open(events)?))?;
            events.sort_by_key(|e| e.timestamp);
            let descriptors = read_descriptors_tsv(BufReader::new(File::open(descriptors)?))?;
            let mut bundle = DataBundle::new(&series, events.clone(), descriptors.clone(), dim, cfg.split)?;
            if let Some(path) = store {
                bundle = bundle.with_store(EmbeddingStore::load(path)?)?;
            }
            Ok(LoadedData {
                series,
                events,
                descriptors,
                schedule: None,
                bundle,
            })
        }
    }
}
