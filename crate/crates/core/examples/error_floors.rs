//! Monte Carlo checks of the self-stimulation error floors.

use iatsf::harness::studies::{dual_intervention, forecaster_noise, partial_observation, weight_sharing};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n = 100_000;
    let s = dual_intervention(n, 1)?;
    println!("history only:\n{}", s.self_stim_cov);
    println!("observing U1:\n{}", s.aware_cov);
    println!("expected reduction B1 S1 B1^T:\n{}", s.reduction);
    println!("floor checks: {:?} / {:?}", s.self_stim.verdict, s.aware.verdict);

    let w = weight_sharing(n, 1)?;
    println!("shared weight {:.4}, residual covariance\n{}", w.shared, w.residual_cov);

    let f = forecaster_noise(n, 0.5, 1)?;
    println!("noisy intervention forecasts, error covariance\n{}", f.error_cov);

    let p = partial_observation(n, 1)?;
    println!(
        "partial observation: floor {:.4}, OLS residual {:.4}, {:?}",
        p.floor[(0, 0)],
        p.residual_cov[(0, 0)],
        p.report.verdict
    );
    Ok(())
}
