//! Writes head-averaged attention maps of an untrained forecaster to CSV.

use iatsf::dataio::Split;
use iatsf::fiats::{export_attention, FiatsModel};
use iatsf::harness::{load_bundle, DatasetSpec, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ExperimentConfig::default();
    if let DatasetSpec::Toy { toy } = &mut cfg.dataset {
        toy.n_steps = 3_000;
    }
    let data = load_bundle(&cfg)?;
    let ds = data.dataset(&cfg, Split::Test, 14, false)?;
    let model = FiatsModel::new(cfg.model.clone(), cfg.lookback, 14)?;
    let out = model.forward_with_attention(&ds.window(0)?.input)?;
    let export = export_attention(&out.attention, &data.series.channel_names);
    let dir = std::env::temp_dir().join("iatsf_attention");
    export.write_to(&dir)?;
    println!("wrote {}", dir.display());
    for line in export.caps_csv.lines().take(6) {
        println!("{line}");
    }
    Ok(())
}
