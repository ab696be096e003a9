//! Generates the frequency-modulated toy and prints the captions around
//! its first frequency change.

use iatsf::dynsys::{generate_fm_toy, FmToyConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = FmToyConfig {
        n_steps: 2_000,
        seed: 3,
        ..FmToyConfig::default()
    };
    let (traj, schedule) = generate_fm_toy(&cfg)?;
    println!("{} steps, {} segments, {} captions", traj.len(), schedule.segments.len(), traj.events.len());
    for s in schedule.segments.iter().take(4) {
        println!("  segment from t={:<4} at frequency {}", s.start, s.frequency);
    }
    let change = schedule.segments[1].start;
    for t in change.saturating_sub(3)..change + 3 {
        println!("t={t:<5} x={:+.3}  {}", schedule.value_at(t), schedule.caption_at(t));
    }
    Ok(())
}
