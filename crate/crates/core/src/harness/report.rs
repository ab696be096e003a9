use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Result;
use crate::dataio::NormStats;
use crate::fiats::EvalMetrics;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub split: String,
    pub windows: usize,
    pub mse: f64,
    pub mae: f64,
    pub mse_per_channel: Vec<f64>,
    pub mae_per_channel: Vec<f64>,
    /// MAE in the units of the raw series.
    pub mae_denorm_per_channel: Vec<f64>,
    pub mae_denorm: f64,
}

impl HorizonMetrics {
    pub fn new(horizon: usize, split: &str, m: &EvalMetrics, norm: &NormStats) -> Self {
        let denorm: Vec<f64> = m
            .mae_per_channel
            .iter()
            .zip(&norm.std)
            .map(|(a, s)| a * s)
            .collect();
        Self {
            horizon,
            split: split.to_string(),
            windows: m.windows,
            mse: m.mse,
            mae: m.mae,
            mse_per_channel: m.mse_per_channel.clone(),
            mae_per_channel: m.mae_per_channel.clone(),
            mae_denorm: denorm.iter().sum::<f64>() / denorm.len().max(1) as f64,
            mae_denorm_per_channel: denorm,
        }
    }
}

/// Metrics on the normalized scale, one row per horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seed: u64,
    pub channels: Vec<String>,
    pub rows: Vec<HorizonMetrics>,
    /// The only field that differs between identical runs.
    pub wall_time_s: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `horizon,split,channel,mse,mae,mae_denorm`, with an `avg` row per horizon.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon,split,channel,mse,mae,mae_denorm\n");
        for r in &self.rows {
            for (c, name) in self.channels.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{:?},{:?},{:?}\n",
                    r.horizon, r.split, name, r.mse_per_channel[c], r.mae_per_channel[c], r.mae_denorm_per_channel[c]
                ));
            }
            out.push_str(&format!(
                "{},{},avg,{:?},{:?},{:?}\n",
                r.horizon, r.split, r.mse, r.mae, r.mae_denorm
            ));
        }
        out
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// What a command wrote, with content hashes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    /// File name to SHA-256.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config_hash: String) -> Self {
        Self {
            command: command.to_string(),
            seed,
            config_hash,
            files: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, dir: &Path, name: &str) -> Result<()> {
        self.files.insert(name.to_string(), sha256_file(&dir.join(name))?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(dir.join(format!("manifest_{}.json", self.command)), json)?;
        Ok(())
    }
}
