//! A small seeded campaign and its calibration statistics.

use mimu::cli::convergence_table;
use mimu::eval::calibration_convergence;
use mimu::sim::{run_monte_carlo, SimConfig};

fn main() -> mimu::Result<()> {
    let cfg = SimConfig {
        seed: 42,
        duration_s: 20.0,
        ..SimConfig::default()
    };
    let records = run_monte_carlo(&cfg, 8)?;
    let diverged = records.iter().filter(|r| r.diverged()).count();
    println!("{} runs, {diverged} diverged", records.len());
    print!("{}", convergence_table(&calibration_convergence(&records)));
    Ok(())
}
