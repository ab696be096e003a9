use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{EpochRecord, FiatsConfig, FiatsError, FiatsModel, Result, TrainState};
use crate::tensor::{Parameters, Tensor};

pub const CHECKPOINT_HEADER: &str = "iatsf-checkpoint v1";

/// A model together with the training state it was saved under.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: FiatsModel,
    pub state: TrainState,
}

impl Checkpoint {
    /// Fails unless the stored configuration hashes to `config`'s hash.
    pub fn expect_config(&self, config: &FiatsConfig) -> Result<()> {
        let (have, want) = (self.model.config().hash(), config.hash());
        if have != want {
            return Err(FiatsError::Checkpoint(format!(
                "config hash mismatch: checkpoint {have}, expected {want}"
            )));
        }
        Ok(())
    }
}

fn bits(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn unbits(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| FiatsError::Checkpoint(format!("bad float bits {s:?}")))
}

fn write_block(out: &mut String, tag: &str, names: &[String], values: &[Tensor]) {
    for (name, t) in names.iter().zip(values) {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let data: Vec<String> = t.data().iter().map(|&v| bits(v)).collect();
        let _ = writeln!(out, "{tag} {name} {} {}", shape.join(","), data.join(" "));
    }
}

/// Writes a bit-exact text checkpoint.
pub fn save_checkpoint(path: &Path, model: &FiatsModel, state: &TrainState) -> Result<()> {
    let cfg = model.config();
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_HEADER}");
    let _ = writeln!(out, "config_hash {}", cfg.hash());
    let json = serde_json::to_string(cfg).map_err(|e| FiatsError::Checkpoint(e.to_string()))?;
    let _ = writeln!(out, "config {json}");
    let _ = writeln!(out, "shape {} {}", model.lookback(), model.horizon());
    let _ = writeln!(
        out,
        "state {} {} {} {} {}",
        state.epoch,
        bits(state.best_val),
        state.bad_epochs,
        u8::from(state.finished),
        state.adam.step
    );
    for r in &state.curve {
        let _ = writeln!(out, "curve {} {} {}", r.epoch, bits(r.train_loss), bits(r.val_loss));
    }
    let names = model.params().names();
    write_block(&mut out, "param", names, model.params().values());
    write_block(&mut out, "adam_m", names, &state.adam.m);
    write_block(&mut out, "adam_v", names, &state.adam.v);
    if let Some(best) = &state.best_params {
        write_block(&mut out, "best", names, best.values());
    }
    fs::write(path, out)?;
    Ok(())
}

fn parse_tensor(shape: &str, data: &[&str]) -> Result<Tensor> {
    let shape: Vec<usize> = shape
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| FiatsError::Checkpoint(format!("bad shape {s:?}"))))
        .collect::<Result<_>>()?;
    let data = data.iter().map(|s| unbits(s)).collect::<Result<Vec<_>>>()?;
    Tensor::new(shape, data).map_err(|e| FiatsError::Checkpoint(e.to_string()))
}

fn fill(target: &mut [Tensor], names: &[String], rows: &[(String, Tensor)], tag: &str) -> Result<()> {
    if rows.len() != names.len() {
        return Err(FiatsError::Checkpoint(format!(
            "{tag}: {} tensors for {} parameters",
            rows.len(),
            names.len()
        )));
    }
    for ((slot, name), (n, t)) in target.iter_mut().zip(names).zip(rows) {
        if n != name || slot.shape() != t.shape() {
            return Err(FiatsError::Checkpoint(format!(
                "{tag}: expected {name} {:?}, found {n} {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        *slot = t.clone();
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let raw = fs::read_to_string(path)?;
    let mut lines = raw.lines();
    if lines.next() != Some(CHECKPOINT_HEADER) {
        return Err(FiatsError::Checkpoint("missing checkpoint header".into()));
    }
    let bad = |m: &str| FiatsError::Checkpoint(m.to_string());
    let mut hash = None;
    let mut config: Option<FiatsConfig> = None;
    let mut shape = None;
    let mut st = None;
    let mut curve = Vec::new();
    let mut blocks: [Vec<(String, Tensor)>; 4] = Default::default();
    for line in lines {
        let (tag, rest) = line.split_once(' ').unwrap_or((line, ""));
        match tag {
            "config_hash" => hash = Some(rest.to_string()),
            "config" => {
                config = Some(serde_json::from_str(rest).map_err(|e| FiatsError::Checkpoint(e.to_string()))?)
            }
            "shape" => {
                let v: Vec<usize> = rest.split(' ').filter_map(|s| s.parse().ok()).collect();
                if v.len() != 2 {
                    return Err(bad("bad shape line"));
                }
                shape = Some((v[0], v[1]));
            }
            "state" => {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 5 {
                    return Err(bad("bad state line"));
                }
                let num = |s: &str| s.parse::<u64>().map_err(|_| bad("bad state field"));
                st = Some((num(f[0])? as usize, unbits(f[1])?, num(f[2])? as usize, num(f[3])? == 1, num(f[4])?));
            }
            "curve" => {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 3 {
                    return Err(bad("bad curve line"));
                }
                curve.push(EpochRecord {
                    epoch: f[0].parse().map_err(|_| bad("bad curve epoch"))?,
                    train_loss: unbits(f[1])?,
                    val_loss: unbits(f[2])?,
                });
            }
            "param" | "adam_m" | "adam_v" | "best" => {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() < 2 {
                    return Err(bad("truncated tensor line"));
                }
                let i = ["param", "adam_m", "adam_v", "best"].iter().position(|t| *t == tag).unwrap_or(0);
                blocks[i].push((f[0].to_string(), parse_tensor(f[1], &f[2..])?));
            }
            "" => {}
            other => return Err(FiatsError::Checkpoint(format!("unknown record {other:?}"))),
        }
    }
    let config = config.ok_or_else(|| bad("missing config"))?;
    if hash.as_deref() != Some(config.hash().as_str()) {
        return Err(bad("config hash does not match the stored config"));
    }
    let (lookback, horizon) = shape.ok_or_else(|| bad("missing shape"))?;
    let (epoch, best_val, bad_epochs, finished, adam_step) = st.ok_or_else(|| bad("missing state"))?;
    let mut model = FiatsModel::new(config, lookback, horizon)?;
    let names = model.params().names().to_vec();
    fill(model.params_mut().values_mut(), &names, &blocks[0], "param")?;
    let mut state = TrainState::new(&model);
    fill(&mut state.adam.m, &names, &blocks[1], "adam_m")?;
    fill(&mut state.adam.v, &names, &blocks[2], "adam_v")?;
    state.adam.step = adam_step;
    state.epoch = epoch;
    state.best_val = best_val;
    state.bad_epochs = bad_epochs;
    state.finished = finished;
    state.curve = curve;
    if !blocks[3].is_empty() {
        let mut best: Parameters = model.params().clone();
        fill(best.values_mut(), &names, &blocks[3], "best")?;
        state.best_params = Some(best);
    }
    Ok(Checkpoint { model, state })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> FiatsConfig {
        FiatsConfig {
            d_model: 8,
            n_heads: 2,
            ffn_dim: 8,
            encoder_layers: 1,
            casm_blocks: 1,
            caps_layers: 1,
            embed_dim: 16,
            seed: 3,
            ..FiatsConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = FiatsModel::new(cfg(), 32, 8).unwrap();
        model.params_mut().values_mut()[0].data_mut()[0] = 0.1 + 0.2;
        let mut state = TrainState::new(&model);
        state.adam.m[1].data_mut()[0] = f64::MIN_POSITIVE;
        state.adam.step = 7;
        state.epoch = 3;
        state.best_val = 0.123456789;
        state.best_params = Some(model.params().clone());
        state.curve.push(EpochRecord {
            epoch: 0,
            train_loss: 1.0 / 3.0,
            val_loss: 2.0 / 3.0,
        });
        save_checkpoint(&path, &model, &state).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.model.params().values(), model.params().values());
        assert_eq!(ck.state, state);
        ck.expect_config(&cfg()).unwrap();
        assert!(ck.expect_config(&FiatsConfig { seed: 4, ..cfg() }).is_err());
    }

    #[test]
    fn tampered_config_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = FiatsModel::new(cfg(), 32, 8).unwrap();
        save_checkpoint(&path, &model, &TrainState::new(&model)).unwrap();
        let raw = fs::read_to_string(&path).unwrap().replace("\"seed\":3", "\"seed\":5");
        fs::write(&path, raw).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(FiatsError::Checkpoint(_))));
        fs::write(&path, "not a checkpoint\n").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
