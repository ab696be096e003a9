use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{FiatsConfig, FiatsError, FiatsModel, Result};
use crate::dataio::{AlignedWindow, WindowDataset, WindowInput};
use crate::rng::{self, streams};
use crate::tensor::{AdamConfig, AdamState, Graph, Parameters, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub adam: AdamState,
    /// Next epoch to run.
    pub epoch: usize,
    pub best_val: f64,
    pub best_params: Option<Parameters>,
    pub bad_epochs: usize,
    pub curve: Vec<EpochRecord>,
    pub finished: bool,
}

impl TrainState {
    pub fn new(model: &FiatsModel) -> Self {
        let cfg = AdamConfig {
            lr: model.config().lr,
            ..AdamConfig::default()
        };
        Self {
            adam: AdamState::new(model.params(), cfg),
            epoch: 0,
            best_val: f64::INFINITY,
            best_params: None,
            bad_epochs: 0,
            curve: Vec::new(),
            finished: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model carrying the parameters with the best validation loss.
    pub model: FiatsModel,
    /// Model as of the last completed epoch.
    pub last: FiatsModel,
    pub state: TrainState,
}

/// Per-channel and averaged errors on the normalized scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mse: f64,
    pub mae: f64,
    pub mse_per_channel: Vec<f64>,
    pub mae_per_channel: Vec<f64>,
    pub windows: usize,
}

/// `count` indices spread evenly over `0..n` (all of them when `None`).
pub(crate) fn even_indices(n: usize, count: Option<usize>) -> Vec<usize> {
    match count {
        Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
        _ => (0..n).collect(),
    }
}

fn load(ds: &WindowDataset, idx: &[usize]) -> Result<Vec<AlignedWindow>> {
    idx.iter().map(|&i| Ok(ds.window(i)?)).collect()
}

/// Evaluates `model` on (a subset of) `ds`.
pub fn evaluate(model: &FiatsModel, ds: &WindowDataset, limit: Option<usize>) -> Result<EvalMetrics> {
    if ds.is_empty() {
        return Err(FiatsError::Shape("evaluation split has no windows".into()));
    }
    let c = ds.channels();
    let mut se = vec![0.0; c];
    let mut ae = vec![0.0; c];
    let idx = even_indices(ds.len(), limit);
    let mut count = 0usize;
    for chunk in idx.chunks(model.config().batch_size.max(1)) {
        let ws = load(ds, chunk)?;
        let inputs: Vec<&WindowInput> = ws.iter().map(|w| &w.input).collect();
        let preds = model.forward_batch(&inputs)?;
        for (w, p) in ws.iter().zip(&preds) {
            for (prow, trow) in p.iter().zip(&w.x_f) {
                for ch in 0..c {
                    let e = prow[ch] - trow[ch];
                    se[ch] += e * e;
                    ae[ch] += e.abs();
                }
            }
            count += w.x_f.len();
        }
    }
    let n = count as f64;
    let mse_per_channel: Vec<f64> = se.iter().map(|s| s / n).collect();
    let mae_per_channel: Vec<f64> = ae.iter().map(|s| s / n).collect();
    Ok(EvalMetrics {
        mse: mse_per_channel.iter().sum::<f64>() / c as f64,
        mae: mae_per_channel.iter().sum::<f64>() / c as f64,
        mse_per_channel,
        mae_per_channel,
        windows: idx.len(),
    })
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

fn step(
    model: &mut FiatsModel,
    adam: &mut AdamState,
    batch: &[AlignedWindow],
    dropout: &mut rng::StreamRng,
) -> Result<f64> {
    let inputs: Vec<&WindowInput> = batch.iter().map(|w| &w.input).collect();
    let (h, c) = (model.horizon(), inputs[0].channels());
    let target: Vec<f64> = batch.iter().flat_map(|w| w.x_f.iter().flatten().copied()).collect();
    let mut g = Graph::new();
    g.set_finite_checks(false);
    let (pred, bp) = model.forward_train(&mut g, &inputs, Some(dropout))?;
    let t = g.constant(Tensor::new(vec![batch.len(), h, c], target)?);
    let loss = g.mse_loss(pred, t)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Ok(value);
    }
    let mut grads = g.backward(loss)?;
    let mut grads = bp.gradients(&mut grads, model.params());
    if let Some(max) = model.config().grad_clip {
        clip(&mut grads, max);
    }
    adam.step(model.params_mut(), &grads)?;
    Ok(value)
}

/// Trains a fresh model from the configuration's seed.
pub fn train(
    config: &FiatsConfig,
    train_set: &WindowDataset,
    val_set: &WindowDataset,
) -> Result<TrainOutcome> {
    let g = train_set.geometry();
    let model = FiatsModel::new(config.clone(), g.lookback, g.horizon)?;
    let state = TrainState::new(&model);
    train_resume(model, state, train_set, val_set, None)
}

/// Continues training from `state`. With `stop_after`, returns once that
/// many epochs in total have completed even if the run is not finished.
pub fn train_resume(
    mut model: FiatsModel,
    mut state: TrainState,
    train_set: &WindowDataset,
    val_set: &WindowDataset,
    stop_after: Option<usize>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(FiatsError::Shape("training and validation splits need windows".into()));
    }
    let cfg = model.config().clone();
    let limit = stop_after.unwrap_or(cfg.epochs).min(cfg.epochs);
    while !state.finished && state.epoch < limit {
        let epoch = state.epoch;
        state.adam.config.lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut r = rng::stream(cfg.seed, rng::substream(streams::BATCH_ORDER, epoch as u64));
        order.shuffle(&mut r);
        order.truncate(cfg.windows_per_epoch.unwrap_or(usize::MAX));
        let mut drop = rng::stream(cfg.seed, rng::substream(streams::DROPOUT, epoch as u64));
        let (mut total, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = load(train_set, chunk)?;
            let l = step(&mut model, &mut state.adam, &batch, &mut drop)?;
            if !l.is_finite() {
                return Err(FiatsError::Diverged {
                    epoch,
                    last_finite: state.curve.last().map(|r| r.epoch),
                });
            }
            total += l * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = total / seen as f64;
        let val_loss = match evaluate(&model, val_set, cfg.val_windows) {
            Ok(m) => m.mse,
            Err(FiatsError::Tensor(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
        if !val_loss.is_finite() || !model.params().all_finite() {
            return Err(FiatsError::Diverged {
                epoch,
                last_finite: state.curve.last().map(|r| r.epoch),
            });
        }
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        state.curve.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < state.best_val {
            state.best_val = val_loss;
            state.best_params = Some(model.params().clone());
            state.bad_epochs = 0;
        } else {
            state.bad_epochs += 1;
            if state.bad_epochs >= cfg.patience {
                log::info!("early stop after epoch {epoch}");
                state.finished = true;
            }
        }
        state.epoch += 1;
        if state.epoch >= cfg.epochs {
            state.finished = true;
        }
    }
    let mut best = model.clone();
    if let Some(p) = &state.best_params {
        best.params_mut().load_from(p)?;
    }
    Ok(TrainOutcome {
        model: best,
        last: model,
        state,
    })
}
