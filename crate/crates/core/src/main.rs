use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use iatsf::harness::{self, ExperimentConfig, HarnessError};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Generate,
    Train,
    Eval,
    Bounds,
    Ablate,
    Whatif,
    Attn,
}

/// Intervention-aware forecasting lab.
#[derive(Debug, Parser)]
#[command(name = "iatsf", version)]
struct Cli {
    command: Command,
    /// Experiment file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("output serializes")
}

fn run(cli: &Cli) -> Result<String, HarnessError> {
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(match cli.command {
        Command::Generate => json(&harness::cmd_generate(&cfg)?),
        Command::Train => json(&harness::cmd_train(&cfg)?),
        Command::Eval => harness::cmd_eval(&cfg)?.to_json(),
        Command::Bounds => {
            let out = harness::cmd_bounds(&cfg)?;
            let failed: Vec<&str> = out.iter().filter(|o| !o.passed).map(|o| o.preset.as_str()).collect();
            if !failed.is_empty() {
                return Err(HarnessError::Bounds(format!("floor check failed for {}", failed.join(", "))));
            }
            json(&out)
        }
        Command::Ablate => json(&harness::cmd_ablate(&cfg)?),
        Command::Whatif => json(&harness::cmd_whatif(&cfg)?),
        Command::Attn => {
            harness::cmd_attn(&cfg)?;
            json(&serde_json::json!({ "written": cfg.out_dir }))
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            println!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let text = e.to_string();
            let message = text.strip_prefix(&format!("{}: ", e.category())).unwrap_or(&text);
            eprintln!("{}", serde_json::json!({ "category": e.category(), "message": message }));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
