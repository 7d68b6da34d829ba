//! Multi-IMU filter against the single-IMU predictor on matched seeds.

use mimu::eval::{median, summarize_run};
use mimu::sim::{run_monte_carlo, FilterMode, SimConfig};

fn main() -> mimu::Result<()> {
    let base = SimConfig {
        seed: 9,
        duration_s: 30.0,
        ..SimConfig::default()
    };
    let single = SimConfig {
        mode: FilterMode::SinglePredictor,
        imus: base.imus[..1].to_vec(),
        ..base.clone()
    };
    for (name, cfg) in [("single_predictor, 1 IMU", single), ("multi_update, 2 IMUs", base)] {
        let rmse: Vec<f64> = run_monte_carlo(&cfg, 6)?
            .iter()
            .map(|r| summarize_run(r).map(|s| s.rmse_position))
            .collect::<mimu::Result<_>>()?;
        println!("{name:<24} median position RMSE {:.4} m", median(&rmse));
    }
    Ok(())
}
