use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::studies::{dual_intervention, forecaster_noise, partial_observation, weight_sharing};
use super::toy::{oracle, toy_swap};
use super::{
    load_bundle, ExperimentConfig, HarnessError, HorizonMetrics, LoadedData, Manifest,
    MetricsReport, Result,
};
use crate::dataio::{write_events_tsv, write_series_csv, ChannelDescriptor, Split, TextMode};
use crate::fiats::{
    edited_window, evaluate, export_attention, load_checkpoint, save_checkpoint, train,
    train_resume, AttentionExport, EpochRecord, EventEdit, FiatsModel,
};

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(&cfg.out_dir)
}

/// Writes the series, events and descriptors plus a manifest.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<Manifest> {
    let data = load_bundle(cfg)?;
    let dir = out_dir(cfg)?;
    write_series_csv(
        BufWriter::new(File::create(dir.join("series.csv"))?),
        &data.series.rows,
        Some(&data.series.timestamps),
    )?;
    write_events_tsv(BufWriter::new(File::create(dir.join("events.tsv"))?), &data.events)?;
    let desc: Vec<ChannelDescriptor> = data
        .descriptors
        .iter()
        .enumerate()
        .map(|(i, t)| ChannelDescriptor::hashed(i, t, cfg.model.embed_dim))
        .collect();
    crate::dataio::write_descriptors_tsv(BufWriter::new(File::create(dir.join("descriptors.tsv"))?), &desc)?;
    let mut manifest = Manifest::new("generate", cfg.seed, cfg.hash());
    for f in ["series.csv", "events.tsv", "descriptors.tsv"] {
        manifest.add(dir, f)?;
    }
    if let Some(s) = &data.schedule {
        fs::write(dir.join("schedule.json"), serde_json::to_string_pretty(s).expect("schedule serializes"))?;
        manifest.add(dir, "schedule.json")?;
    }
    manifest.write(dir)?;
    Ok(manifest)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub horizon: usize,
    pub epochs_run: usize,
    pub best_val: f64,
    pub curve: Vec<EpochRecord>,
    pub wall_time_s: f64,
}

fn loss_csv(curve: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for r in curve {
        out.push_str(&format!("{},{:?},{:?}\n", r.epoch, r.train_loss, r.val_loss));
    }
    out
}

/// Trains one model per horizon, writing `model_h{H}.ckpt` and
/// `loss_h{H}.csv`. With `resume`, continues from a matching checkpoint.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<TrainSummary>> {
    let data = load_bundle(cfg)?;
    let dir = out_dir(cfg)?.to_path_buf();
    let mut manifest = Manifest::new("train", cfg.seed, cfg.hash());
    let mut out = Vec::new();
    for &h in &cfg.horizons {
        let clock = Instant::now();
        let tr = data.dataset(cfg, Split::Train, h, true)?;
        let va = data.dataset(cfg, Split::Val, h, true)?;
        let ckpt = cfg.checkpoint_path(h);
        let outcome = if cfg.resume && ckpt.exists() {
            let ck = load_checkpoint(&ckpt)?;
            ck.expect_config(&cfg.model)?;
            log::info!("resuming horizon {h} at epoch {}", ck.state.epoch);
            train_resume(ck.model, ck.state, &tr, &va, None)?
        } else {
            train(&cfg.model, &tr, &va)?
        };
        save_checkpoint(&ckpt, &outcome.last, &outcome.state)?;
        let loss = format!("loss_h{h}.csv");
        fs::write(dir.join(&loss), loss_csv(&outcome.state.curve))?;
        manifest.add(&dir, &loss)?;
        manifest.add(&dir, &format!("model_h{h}.ckpt"))?;
        out.push(TrainSummary {
            horizon: h,
            epochs_run: outcome.state.curve.len(),
            best_val: outcome.state.best_val,
            curve: outcome.state.curve,
            wall_time_s: clock.elapsed().as_secs_f64(),
        });
    }
    manifest.write(&dir)?;
    Ok(out)
}

/// Best-validation model stored in the checkpoint for horizon `h`.
pub(crate) fn load_model(cfg: &ExperimentConfig, h: usize) -> Result<FiatsModel> {
    let path = cfg.checkpoint_path(h);
    if !path.exists() {
        return Err(HarnessError::Config(format!(
            "no checkpoint at {}; run train first",
            path.display()
        )));
    }
    let ck = load_checkpoint(&path)?;
    ck.expect_config(&cfg.model)?;
    if ck.model.lookback() != cfg.lookback || ck.model.horizon() != h {
        return Err(HarnessError::Config(format!(
            "checkpoint is for look-back {} / horizon {}",
            ck.model.lookback(),
            ck.model.horizon()
        )));
    }
    let mut model = ck.model;
    if let Some(best) = &ck.state.best_params {
        model.params_mut().load_from(best)?;
    }
    Ok(model)
}

impl From<crate::tensor::TensorError> for HarnessError {
    fn from(e: crate::tensor::TensorError) -> Self {
        Self::Model(e.to_string())
    }
}

fn report_for(cfg: &ExperimentConfig, data: &LoadedData, models: &[(usize, FiatsModel)], clock: Instant) -> Result<MetricsReport> {
    let split = cfg.eval.split;
    let mut rows = Vec::new();
    for (h, model) in models {
        let ds = data.dataset(cfg, split, *h, false)?;
        let m = evaluate(model, &ds, cfg.eval.max_windows)?;
        rows.push(HorizonMetrics::new(*h, split.name(), &m, data.bundle.norm()));
    }
    Ok(MetricsReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        channels: data.series.channel_names.clone(),
        rows,
        wall_time_s: clock.elapsed().as_secs_f64(),
    })
}

/// Evaluates every horizon's checkpoint on the configured split.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let clock = Instant::now();
    let data = load_bundle(cfg)?;
    let models = cfg
        .horizons
        .iter()
        .map(|&h| Ok((h, load_model(cfg, h)?)))
        .collect::<Result<Vec<_>>>()?;
    let report = report_for(cfg, &data, &models, clock)?;
    let dir = out_dir(cfg)?;
    fs::write(dir.join("metrics.json"), report.to_json())?;
    fs::write(dir.join("metrics.csv"), report.to_csv())?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundsOutcome {
    pub preset: String,
    pub passed: bool,
    pub report: serde_json::Value,
}

/// Runs the named Monte Carlo bound studies.
pub fn cmd_bounds(cfg: &ExperimentConfig) -> Result<Vec<BoundsOutcome>> {
    let n = cfg.bounds.samples;
    let dir = out_dir(cfg)?.to_path_buf();
    let mut manifest = Manifest::new("bounds", cfg.seed, cfg.hash());
    let mut out = Vec::new();
    for preset in &cfg.bounds.presets {
        let (passed, report) = match preset.as_str() {
            "b22" => {
                let s = dual_intervention(n, cfg.seed)?;
                (s.self_stim.passed() && s.aware.passed(), serde_json::to_value(&s).expect("study serializes"))
            }
            "b44" => {
                let s = weight_sharing(n, cfg.seed)?;
                (s.report.passed(), serde_json::to_value(&s).expect("study serializes"))
            }
            "b3" => {
                let s = forecaster_noise(n, 0.5, cfg.seed)?;
                (s.report.passed(), serde_json::to_value(&s).expect("study serializes"))
            }
            "b5" => {
                let s = partial_observation(n, cfg.seed)?;
                (s.report.passed(), serde_json::to_value(&s).expect("study serializes"))
            }
            other => return Err(HarnessError::Config(format!("unknown bounds preset {other:?}"))),
        };
        let name = format!("bounds_{preset}.json");
        fs::write(dir.join(&name), serde_json::to_string_pretty(&report).expect("json"))?;
        manifest.add(&dir, &name)?;
        log::info!("{preset}: {}", if passed { "pass" } else { "fail" });
        out.push(BoundsOutcome {
            preset: preset.clone(),
            passed,
            report,
        });
    }
    manifest.write(&dir)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub kind: String,
    pub train_text: TextMode,
    pub test_text: TextMode,
    pub zero_desc: bool,
    pub sigma: f64,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub horizon: usize,
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,train_text,test_text,zero_desc,sigma,mse,mae\n");
        let mode = |m: TextMode| serde_json::to_value(m).expect("mode").as_str().unwrap_or("").to_string();
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{:?},{:?},{:?}\n",
                c.kind,
                mode(c.train_text),
                mode(c.test_text),
                c.zero_desc,
                c.sigma,
                c.mse,
                c.mae
            ));
        }
        out
    }

    pub fn cell(&self, kind: &str, train: TextMode, test: TextMode) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.kind == kind && c.train_text == train && c.test_text == test)
    }
}

struct Job {
    kind: &'static str,
    cfg: ExperimentConfig,
    tests: Vec<TextMode>,
}

/// Train × test text-mode matrix, noise sweep and the news-free baseline
/// at the first configured horizon. Training jobs run on separate threads.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<AblationReport> {
    let data = load_bundle(cfg)?;
    let h = cfg.horizons[0];
    let with = |train: TextMode, sigma: f64, zero_desc: bool| {
        let mut c = cfg.clone();
        c.ablation.train_text = train;
        c.ablation.noise_sigma = sigma;
        c.ablation.zero_desc = zero_desc;
        c
    };
    let mut jobs: Vec<Job> = cfg
        .ablation
        .text_modes
        .iter()
        .map(|&m| Job {
            kind: "text",
            cfg: with(m, 0.0, false),
            tests: cfg.ablation.text_modes.clone(),
        })
        .collect();
    jobs.extend(cfg.ablation.noise_grid.iter().map(|&s| Job {
        kind: "noise",
        cfg: with(TextMode::Good, s, false),
        tests: vec![TextMode::Good],
    }));
    jobs.push(Job {
        kind: "baseline",
        cfg: with(TextMode::Zero, 0.0, true),
        tests: vec![TextMode::Zero],
    });

    let run = |job: &Job| -> Result<Vec<AblationCell>> {
        let c = &job.cfg;
        let tr = data.dataset(c, Split::Train, h, true)?;
        let va = data.dataset(c, Split::Val, h, true)?;
        let model = train(&c.model, &tr, &va)?.model;
        job.tests
            .iter()
            .map(|&t| {
                let mut tc = c.clone();
                tc.ablation.test_text = t;
                let ds = data.dataset(&tc, c.eval.split, h, false)?;
                let m = evaluate(&model, &ds, c.eval.max_windows)?;
                Ok(AblationCell {
                    kind: job.kind.to_string(),
                    train_text: c.ablation.train_text,
                    test_text: t,
                    zero_desc: c.ablation.zero_desc,
                    sigma: c.ablation.noise_sigma,
                    mse: m.mse,
                    mae: m.mae,
                })
            })
            .collect()
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut cells = Vec::new();
    for chunk in jobs.chunks(workers) {
        let results: Vec<Result<Vec<AblationCell>>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|j| s.spawn(|| run(j))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(HarnessError::Model("ablation worker panicked".into()))))
                .collect()
        });
        for r in results {
            cells.extend(r?);
        }
    }
    let report = AblationReport { horizon: h, cells };
    let dir = out_dir(cfg)?;
    fs::write(dir.join("ablation.csv"), report.to_csv())?;
    fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&report).expect("json"))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhatIfReport {
    pub window: usize,
    pub horizon: usize,
    pub forecast_time: i64,
    pub edits: Vec<EventEdit>,
    /// `[H][C]`, all normalized.
    pub base: Vec<Vec<f64>>,
    pub edited: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
    /// Toy only: the signal the edited schedule would have produced.
    pub edited_oracle: Option<Vec<Vec<f64>>>,
    /// First horizon step of the patches the edits touch.
    pub affected_from: usize,
    pub mse_edited_vs_target: f64,
    pub mse_edited_vs_oracle: Option<f64>,
}

fn mse_from(a: &[Vec<f64>], b: &[Vec<f64>], from: usize) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for (ra, rb) in a[from..].iter().zip(&b[from..]) {
        for (x, y) in ra.iter().zip(rb) {
            s += (x - y).powi(2);
            n += 1;
        }
    }
    s / n.max(1) as f64
}

/// Re-runs one test window under edited future events.
pub fn cmd_whatif(cfg: &ExperimentConfig) -> Result<WhatIfReport> {
    let h = cfg.pick_horizon(cfg.whatif.horizon)?;
    let model = load_model(cfg, h)?;
    let data = load_bundle(cfg)?;
    let ds = data.dataset(cfg, cfg.eval.split, h, false)?;
    let idx = cfg.whatif.window;
    let base_w = ds.window(idx)?;
    let f = base_w.forecast_time;
    let geo = ds.geometry().clone();
    let mut edits = cfg.whatif.edits.clone();
    if let Some((a, b)) = cfg.whatif.swap_patches {
        let off = |p: usize| {
            geo.future_patch_offsets
                .get(p)
                .map(|o| ds.timestamps()[base_w.start + geo.lookback + o])
                .ok_or_else(|| HarnessError::Config(format!("no future patch {p}")))
        };
        edits.push(EventEdit::Swap { a: off(a)?, b: off(b)? });
    }
    let mut oracle_rows = None;
    let mut affected_from = None;
    if cfg.whatif.toy_swap {
        let sched = data
            .schedule
            .as_ref()
            .ok_or_else(|| HarnessError::Config("toy_swap needs the toy dataset".into()))?;
        let start = base_w.start + geo.lookback;
        let swap = toy_swap(sched, start, h, 1)?.ok_or_else(|| {
            HarnessError::Config(format!("window {idx} has no swappable change inside the horizon"))
        })?;
        let norm = data.bundle.norm();
        let o = oracle(&swap.schedule, start, h, norm.mean[0], norm.std[0]);
        oracle_rows = Some(o.into_iter().map(|v| vec![v]).collect::<Vec<_>>());
        affected_from = Some(geo.future_patch_offsets[geo.future_patch_of(swap.first_step)]);
        edits.extend(swap.edits);
    }
    let edited_w = edited_window(&ds, idx, &edits)?;
    let base = model.forward(&base_w.input)?;
    let edited = model.forward(&edited_w.input)?;
    let first_edit = edits
        .iter()
        .flat_map(|e| match e {
            EventEdit::Replace { timestamp, .. } | EventEdit::Insert { timestamp, .. } | EventEdit::Remove { timestamp } => {
                vec![*timestamp]
            }
            EventEdit::Swap { a, b } => vec![*a, *b],
        })
        .min();
    let affected_from = affected_from.unwrap_or_else(|| match first_edit {
        Some(t) => {
            let rel = (t - f).max(0) as usize;
            let p = geo.future_patch_offsets.partition_point(|&o| o <= rel).saturating_sub(1);
            geo.future_patch_offsets[p]
        }
        None => 0,
    });
    let report = WhatIfReport {
        window: idx,
        horizon: h,
        forecast_time: f,
        mse_edited_vs_target: mse_from(&edited, &base_w.x_f, affected_from),
        mse_edited_vs_oracle: oracle_rows.as_ref().map(|o| mse_from(&edited, o, affected_from)),
        edits,
        base,
        edited,
        target: base_w.x_f,
        edited_oracle: oracle_rows,
        affected_from,
    };
    let dir = out_dir(cfg)?;
    let mut csv = String::from("step,channel,base,edited,target,edited_oracle\n");
    for t in 0..h {
        for c in 0..report.base[t].len() {
            let o = report
                .edited_oracle
                .as_ref()
                .map_or(String::new(), |o| format!("{:?}", o[t][c]));
            csv.push_str(&format!(
                "{t},{c},{:?},{:?},{:?},{o}\n",
                report.base[t][c], report.edited[t][c], report.target[t][c]
            ));
        }
    }
    fs::write(dir.join("whatif.csv"), csv)?;
    fs::write(dir.join("whatif.json"), serde_json::to_string_pretty(&report).expect("json"))?;
    Ok(report)
}

/// Exports head-averaged attention maps for one window.
pub fn cmd_attn(cfg: &ExperimentConfig) -> Result<AttentionExport> {
    let h = cfg.pick_horizon(cfg.attn.horizon)?;
    let model = load_model(cfg, h)?;
    let data = load_bundle(cfg)?;
    let ds = data.dataset(cfg, cfg.eval.split, h, false)?;
    let w = ds.window(cfg.attn.window)?;
    let out = model.forward_with_attention(&w.input)?;
    let export = export_attention(&out.attention, &data.series.channel_names);
    export.write_to(out_dir(cfg)?)?;
    Ok(export)
}
