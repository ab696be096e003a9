//! Runs the command-line pipeline from an inline configuration:
//! generate, train, eval and the bound presets.

use iatsf::harness::{cmd_bounds, cmd_eval, cmd_generate, cmd_train, ExperimentConfig};

const CONFIG: &str = r#"
seed = 11
lookback = 60
horizons = [14]
[dataset]
kind = "toy"
[dataset.toy]
n_steps = 6000
[model]
epochs = 4
windows_per_epoch = 512
val_windows = 128
[eval]
max_windows = 200
[bounds]
presets = ["b22", "b3"]
samples = 50000
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut cfg = ExperimentConfig::from_toml(CONFIG)?;
    cfg.out_dir = std::env::temp_dir().join("iatsf_experiment");
    let manifest = cmd_generate(&cfg)?;
    println!("generated {:?}", manifest.files.keys().collect::<Vec<_>>());
    for s in cmd_train(&cfg)? {
        println!("h={} best val {:.4} after {} epochs", s.horizon, s.best_val, s.epochs_run);
    }
    print!("{}", cmd_eval(&cfg)?.to_csv());
    for b in cmd_bounds(&cfg)? {
        println!("{}: {}", b.preset, if b.passed { "pass" } else { "fail" });
    }
    println!("outputs in {}", cfg.out_dir.display());
    Ok(())
}
