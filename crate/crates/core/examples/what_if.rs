//! Trains a small forecaster on the toy, then swaps the next two frequency
//! changes in the future captions and compares both forecasts with the
//! signal the swapped schedule would have produced.

use iatsf::dataio::Split;
use iatsf::fiats::{edited_window, train, FiatsConfig};
use iatsf::harness::toy::{oracle, toy_swap};
use iatsf::harness::{load_bundle, DatasetSpec, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut cfg = ExperimentConfig {
        horizons: vec![14],
        model: FiatsConfig {
            epochs: 12,
            lr: 3e-3,
            windows_per_epoch: Some(2048),
            val_windows: Some(256),
            ..FiatsConfig::default()
        },
        ..ExperimentConfig::default()
    };
    if let DatasetSpec::Toy { toy } = &mut cfg.dataset {
        toy.n_steps = 12_000;
    }
    let data = load_bundle(&cfg)?;
    let model = train(
        &cfg.model,
        &data.dataset(&cfg, Split::Train, 14, true)?,
        &data.dataset(&cfg, Split::Val, 14, true)?,
    )?
    .model;

    let ds = data.dataset(&cfg, Split::Test, 14, false)?;
    let sched = data.schedule.as_ref().expect("toy schedule");
    let norm = data.bundle.norm();
    let (i, swap) = (0..ds.len())
        .find_map(|i| {
            let start = ds.starts()[i] + cfg.lookback;
            toy_swap(sched, start, 14, 6).ok().flatten().map(|s| (i, s))
        })
        .expect("a window with a change inside the horizon");
    let start = ds.starts()[i] + cfg.lookback;
    let base = model.forward(&ds.window(i)?.input)?;
    let edited = model.forward(&edited_window(&ds, i, &swap.edits)?.input)?;
    let original = oracle(sched, start, 14, norm.mean[0], norm.std[0]);
    let swapped = oracle(&swap.schedule, start, 14, norm.mean[0], norm.std[0]);
    println!("change at horizon step {}; {} captions edited", swap.first_step, swap.edits.len());
    println!("step   original  forecast | swapped  forecast");
    for t in 0..14 {
        println!(
            "{t:>4}  {:+.3}    {:+.3}   | {:+.3}   {:+.3}",
            original[t], base[t][0], swapped[t], edited[t][0]
        );
    }
    Ok(())
}
