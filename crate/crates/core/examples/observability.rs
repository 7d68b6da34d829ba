//! Rank of the observability matrix with and without the camera.

use mimu::camera::{CameraModel, LandmarkSet};
use mimu::observability::{analyze, generic_state};

fn main() -> mimu::Result<()> {
    let cam = CameraModel::default();
    let landmarks = LandmarkSet::grid(10, 10, 0.5, 5.0)?;
    println!("{:>4} {:>8} {:>6} {:>10} {:>14}", "IMUs", "camera", "dim", "rank", "deficiency");
    for n in 1..=3 {
        let x = generic_state(n, n as u64)?;
        for camera in [false, true] {
            let a = analyze(&x, camera.then_some((&cam, &landmarks)), None)?;
            let r = &a.pin_adjusted;
            println!("{n:>4} {camera:>8} {:>6} {:>10} {:>14}", r.state_dim, r.rank, r.deficiency);
        }
    }
    Ok(())
}
