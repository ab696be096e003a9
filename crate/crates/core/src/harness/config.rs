use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{HarnessError, Result};
use crate::dataio::{Split, SplitSpec, TextMode, TextTransform};
use crate::dynsys::FmToyConfig;
use crate::fiats::{EventEdit, FiatsConfig};

/// Where the series comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Toy {
        #[serde(default)]
        toy: FmToyConfig,
    },
    Files {
        series: PathBuf,
        events: PathBuf,
        descriptors: PathBuf,
        /// Optional precomputed embeddings keyed by text.
        #[serde(default)]
        store: Option<PathBuf>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self::Toy {
            toy: FmToyConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    pub train_text: TextMode,
    pub test_text: TextMode,
    pub zero_desc: bool,
    pub noise_sigma: f64,
    /// Text modes crossed for the train × test matrix.
    pub text_modes: Vec<TextMode>,
    pub noise_grid: Vec<f64>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            train_text: TextMode::Good,
            test_text: TextMode::Good,
            zero_desc: false,
            noise_sigma: 0.0,
            text_modes: vec![TextMode::Good, TextMode::Zero, TextMode::Random],
            noise_grid: vec![0.0, 0.05, 0.1, 0.2, 0.5, 1.0],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WhatIfSpec {
    pub window: usize,
    /// Horizon of the checkpoint to use; the first configured one if unset.
    pub horizon: Option<usize>,
    pub edits: Vec<EventEdit>,
    /// Exchange the events sitting at the starts of two future patches.
    pub swap_patches: Option<(usize, usize)>,
    /// Toy only: swap the next two scheduled frequency changes and compare
    /// against the regenerated signal.
    pub toy_swap: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttnSpec {
    pub window: usize,
    pub horizon: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsSpec {
    pub presets: Vec<String>,
    pub samples: usize,
}

impl Default for BoundsSpec {
    fn default() -> Self {
        Self {
            presets: ["b22", "b44", "b3", "b5"].map(String::from).to_vec(),
            samples: 200_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub split: Split,
    /// Evenly spaced subset of windows; all when unset.
    pub max_windows: Option<usize>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            split: Split::Test,
            max_windows: None,
        }
    }
}

/// One experiment, read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; overrides the toy and model seeds.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub lookback: usize,
    pub horizons: Vec<usize>,
    pub train_stride: usize,
    pub eval_stride: usize,
    /// Continue from an existing checkpoint with the same configuration.
    pub resume: bool,
    pub dataset: DatasetSpec,
    pub split: SplitSpec,
    pub model: FiatsConfig,
    pub ablation: AblationSpec,
    pub eval: EvalSpec,
    pub whatif: WhatIfSpec,
    pub attn: AttnSpec,
    pub bounds: BoundsSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            lookback: 60,
            horizons: vec![14],
            train_stride: 1,
            eval_stride: 1,
            resume: false,
            dataset: DatasetSpec::default(),
            split: SplitSpec::default(),
            model: FiatsConfig::default(),
            ablation: AblationSpec::default(),
            eval: EvalSpec::default(),
            whatif: WhatIfSpec::default(),
            attn: AttnSpec::default(),
            bounds: BoundsSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(raw: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(raw).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&raw)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        if let DatasetSpec::Toy { toy } = &mut self.dataset {
            toy.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return bad("horizons must be a non-empty list of positive lengths".into());
        }
        if self.lookback < self.model.patch_len {
            return bad(format!(
                "lookback {} is shorter than patch_len {}",
                self.lookback, self.model.patch_len
            ));
        }
        if self.train_stride == 0 || self.eval_stride == 0 {
            return bad("strides must be positive".into());
        }
        let sig = self.ablation.noise_sigma;
        if !(sig.is_finite() && sig >= 0.0) || self.ablation.noise_grid.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("noise levels must be finite and non-negative".into());
        }
        self.model.validate()?;
        self.split.validate()?;
        if let DatasetSpec::Toy { toy } = &self.dataset {
            toy.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn train_transform(&self) -> TextTransform {
        TextTransform::good(self.seed)
            .with_mode(self.ablation.train_text)
            .with_noise(self.ablation.noise_sigma)
            .with_zero_desc(self.ablation.zero_desc)
    }

    pub fn test_transform(&self) -> TextTransform {
        TextTransform::good(self.seed)
            .with_mode(self.ablation.test_text)
            .with_noise(self.ablation.noise_sigma)
            .with_zero_desc(self.ablation.zero_desc)
    }

    pub fn checkpoint_path(&self, horizon: usize) -> PathBuf {
        self.out_dir.join(format!("model_h{horizon}.ckpt"))
    }

    pub fn pick_horizon(&self, requested: Option<usize>) -> Result<usize> {
        match requested {
            Some(h) if self.horizons.contains(&h) => Ok(h),
            Some(h) => Err(HarnessError::Config(format!("horizon {h} is not configured"))),
            None => Ok(self.horizons[0]),
        }
    }
}
