//! RMSE, relative pose error and NEES of a run.

use mimu::eval::{nees, rmse, rpe, Pose};
use mimu::sim::{run_single, SimConfig};

fn main() -> mimu::Result<()> {
    let rec = run_single(&SimConfig {
        seed: 3,
        duration_s: 20.0,
        ..SimConfig::default()
    })?;
    let times: Vec<f64> = rec.epochs.iter().map(|e| e.t).collect();
    let truth: Vec<Pose> = rec.epochs.iter().map(|e| e.truth).collect();
    let est: Vec<Pose> = rec.epochs.iter().map(|e| e.estimate).collect();
    let p = |v: &[Pose]| v.iter().map(|x| x.position).collect::<Vec<_>>();
    println!("position RMSE {:.4} m", rmse(&p(&truth), &p(&est))?);
    for w in [1.0, 5.0] {
        let r = rpe(&times, &truth, &est, w)?;
        println!("RPE {w} s: rms {:.4} m, max {:.4} m over {} windows", r.rms, r.max, r.pairs);
    }
    let values: Vec<f64> = rec.epochs.iter().filter_map(|e| nees(&e.truth, &e.estimate, &e.pose_cov).ok()).collect();
    println!("mean pose NEES {:.2} (6 expected)", values.iter().sum::<f64>() / values.len() as f64);
    Ok(())
}
