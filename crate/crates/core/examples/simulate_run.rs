//! One simulated run with online calibration, written as CSV.
//!
//! `cargo run --example simulate_run -- [output_dir]`

use mimu::cli::write_run;
use mimu::eval::summarize_run;
use mimu::sim::{run_single, SimConfig};

fn main() -> mimu::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "out/example_run".into());
    let cfg = SimConfig {
        seed: 11,
        duration_s: 30.0,
        ..SimConfig::default()
    };
    let rec = run_single(&cfg)?;
    let s = summarize_run(&rec)?;
    println!("position RMSE {:.4} m, RPE(1 s) {:.4} m, mean NEES {:.2}", s.rmse_position, s.rpe_1s, s.nees_mean);
    let last = rec.epochs.last().expect("epochs");
    let e = &last.calibration[1];
    println!(
        "IMU 1 final lever-arm error {:.1} mm, orientation error {:.2} mrad",
        1e3 * (e.error[0].powi(2) + e.error[1].powi(2) + e.error[2].powi(2)).sqrt(),
        1e3 * (e.error[3].powi(2) + e.error[4].powi(2) + e.error[5].powi(2)).sqrt()
    );
    println!("wrote {}", write_run(out.as_ref(), &rec)?.display());
    Ok(())
}
