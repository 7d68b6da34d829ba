//! A YAML config parsed into a campaign, then run once.

use mimu::cli::parse_config_str;
use mimu::eval::summarize_run;
use mimu::sim::run_single;

const CONFIG: &str = "
seed: 5
duration_s: 15
mode: multi_update
imus:
  - preset: VN300
  - preset: VN100
    extrinsic: {pos_m: [0.1, -0.05, 0.03], rotvec_rad: [0.1, -0.2, 0.3]}
    bias: {accel: [0.05, -0.02, 0.01], gyro: [0.002, 0.0, -0.001]}
camera:
  rate_hz: 20
  landmarks: {nx: 8, ny: 8, spacing_m: 0.5, offset_m: 5.0}
";

fn main() -> mimu::Result<()> {
    let campaign = parse_config_str(CONFIG)?;
    println!("{} IMUs, {} runs, output to {}", campaign.sim.imus.len(), campaign.runs, campaign.output_dir.display());
    let s = summarize_run(&run_single(&campaign.sim)?)?;
    println!("position RMSE {:.4} m", s.rmse_position);

    match parse_config_str("duration_s: -3\n") {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
