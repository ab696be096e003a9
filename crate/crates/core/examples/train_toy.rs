//! Trains the forecaster and its news-free twin on the toy and compares
//! their test MSE.
//!
//! cargo run --release --example train_toy -- [horizon] [epochs]

use std::time::Instant;

use iatsf::dataio::{Split, TextMode};
use iatsf::fiats::{evaluate, train, FiatsConfig};
use iatsf::harness::{load_bundle, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let horizon = args.first().copied().unwrap_or(14);
    let cfg = ExperimentConfig {
        horizons: vec![horizon],
        model: FiatsConfig {
            lr: 1.5e-3,
            cosine_decay: true,
            batch_size: 8,
            epochs: args.get(1).copied().unwrap_or(50),
            patience: 8,
            windows_per_epoch: Some(4096),
            val_windows: Some(256),
            ..FiatsConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let data = load_bundle(&cfg)?;
    let mut scores = Vec::new();
    for text in [TextMode::Good, TextMode::Zero] {
        let mut c = cfg.clone();
        c.ablation.train_text = text;
        c.ablation.test_text = text;
        let clock = Instant::now();
        let model = train(
            &c.model,
            &data.dataset(&c, Split::Train, horizon, true)?,
            &data.dataset(&c, Split::Val, horizon, true)?,
        )?
        .model;
        let m = evaluate(&model, &data.dataset(&c, Split::Test, horizon, false)?, Some(1000))?;
        println!(
            "{text:?} news: test mse {:.4}, mae {:.4} ({:.0}s)",
            m.mse,
            m.mae,
            clock.elapsed().as_secs_f64()
        );
        scores.push(m.mse);
    }
    println!("ratio {:.3}", scores[0] / scores[1]);
    Ok(())
}
