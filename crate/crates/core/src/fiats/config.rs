use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::FiatsError;
use crate::dataio::WindowGeometry;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FiatsConfig {
    pub patch_len: usize,
    pub patch_stride: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub casm_blocks: usize,
    /// Channel-axis self-attention layers inside each intervention block.
    pub casm_self_attn_layers: usize,
    pub caps_layers: usize,
    pub dropout: f64,
    pub lr: f64,
    /// Anneal the learning rate along a half cosine to 5% of `lr` by the
    /// last epoch.
    pub cosine_decay: bool,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Training windows drawn per epoch; all of them when `None`.
    pub windows_per_epoch: Option<usize>,
    /// Validation windows evaluated per epoch (evenly spaced); all when `None`.
    pub val_windows: Option<usize>,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub instance_norm: bool,
    /// Feed history-side news into the encoder.
    pub history_news: bool,
    pub embed_dim: usize,
    pub max_slots: usize,
    /// Output patch length; derived from the horizon when `None`.
    pub out_patch_len: Option<usize>,
}

impl Default for FiatsConfig {
    fn default() -> Self {
        Self {
            patch_len: 16,
            patch_stride: 8,
            d_model: 32,
            n_heads: 4,
            ffn_dim: 64,
            encoder_layers: 2,
            casm_blocks: 3,
            casm_self_attn_layers: 1,
            caps_layers: 2,
            dropout: 0.0,
            lr: 1e-3,
            cosine_decay: false,
            epochs: 30,
            batch_size: 32,
            patience: 5,
            windows_per_epoch: None,
            val_windows: None,
            grad_clip: Some(1.0),
            seed: 0,
            instance_norm: false,
            history_news: false,
            embed_dim: 64,
            max_slots: 4,
            out_patch_len: None,
        }
    }
}

impl FiatsConfig {
    /// Learning rate used during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if !self.cosine_decay || self.epochs < 2 {
            return self.lr;
        }
        let floor = 0.05 * self.lr;
        let x = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
        floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * x).cos())
    }

    pub fn validate(&self) -> Result<(), FiatsError> {
        let bad = |m: &str| Err(FiatsError::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.patch_len == 0 || self.patch_stride == 0 || self.patch_stride > self.patch_len {
            return bad("need 0 < patch_stride <= patch_len");
        }
        if self.casm_blocks == 0 {
            return bad("casm_blocks must be at least 1");
        }
        if self.caps_layers == 0 {
            return bad("caps_layers must be at least 1");
        }
        if self.ffn_dim == 0 || self.batch_size == 0 || self.max_slots == 0 {
            return bad("ffn_dim, batch_size and max_slots must be positive");
        }
        if self.embed_dim < 16 {
            return bad("embed_dim must be at least 16");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.out_patch_len == Some(0) {
            return bad("out_patch_len must be positive");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Number of future tokens and their length for horizon `h`.
    pub fn output_patches(&self, horizon: usize) -> Result<(usize, usize), FiatsError> {
        if horizon == 0 {
            return Err(FiatsError::Config("horizon must be positive".into()));
        }
        let (pf, len) = match self.out_patch_len {
            Some(o) => (horizon.div_ceil(o), o),
            None => {
                let pf = horizon.div_ceil(self.patch_stride);
                (pf, horizon.div_ceil(pf))
            }
        };
        if pf * len < horizon {
            return Err(FiatsError::Config(format!(
                "{pf} output patches of {len} cannot cover horizon {horizon}"
            )));
        }
        Ok((pf, len))
    }

    pub fn geometry(&self, lookback: usize, horizon: usize) -> Result<WindowGeometry, FiatsError> {
        let history = super::patch_starts(lookback, self.patch_len, self.patch_stride)?;
        let (pf, len) = self.output_patches(horizon)?;
        Ok(WindowGeometry {
            lookback,
            horizon,
            history_patch_offsets: history,
            future_patch_offsets: (0..pf).map(|p| p * len).collect(),
            max_slots: self.max_slots,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let c = FiatsConfig {
            lr: 2e-3,
            epochs: 11,
            cosine_decay: true,
            ..FiatsConfig::default()
        };
        assert_eq!(c.lr_at(0), 2e-3);
        assert!((c.lr_at(10) - 1e-4).abs() < 1e-15);
        assert!((c.lr_at(5) - 1.05e-3).abs() < 1e-12);
        assert!((1..11).all(|e| c.lr_at(e) < c.lr_at(e - 1)));
        let flat = FiatsConfig { cosine_decay: false, ..c };
        assert_eq!(flat.lr_at(7), 2e-3);
    }

    #[test]
    fn output_patch_layout() {
        let c = FiatsConfig::default();
        assert_eq!(c.output_patches(14).unwrap(), (2, 7));
        assert_eq!(c.output_patches(120).unwrap(), (15, 8));
        let c = FiatsConfig {
            out_patch_len: Some(7),
            ..c
        };
        assert_eq!(c.output_patches(14).unwrap(), (2, 7));
        assert_eq!(c.output_patches(15).unwrap(), (3, 7));
    }

    #[test]
    fn validation() {
        assert!(FiatsConfig::default().validate().is_ok());
        for c in [
            FiatsConfig { d_model: 30, ..Default::default() },
            FiatsConfig { patch_stride: 20, ..Default::default() },
            FiatsConfig { casm_blocks: 0, ..Default::default() },
        ] {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn hash_tracks_fields() {
        let a = FiatsConfig::default();
        let b = FiatsConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn geometry_for_toy() {
        let g = FiatsConfig::default().geometry(60, 14).unwrap();
        assert_eq!(g.history_patch_offsets, vec![0, 8, 16, 24, 32, 40, 44]);
        assert_eq!(g.future_patch_offsets, vec![0, 7]);
    }
}
