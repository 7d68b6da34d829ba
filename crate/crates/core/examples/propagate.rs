//! Free propagation of a two-IMU state: mean and covariance growth.

use mimu::propagation::{propagate_to, ImuProcessNoise, ProcessNoise};
use mimu::so3::quat_from_euler_zyx;
use mimu::state::{gravity_vector, preset_noise, BodyState, FilterState, ImuCalibration};
use nalgebra::Vector3;

fn main() -> mimu::Result<()> {
    let body = BodyState {
        velocity: Vector3::new(1.0, 0.0, 0.0),
        angular_rate: Vector3::new(0.0, 0.0, 0.2),
        ..BodyState::default()
    };
    let imus = vec![
        ImuCalibration::reference(),
        ImuCalibration::new(Vector3::new(0.1, -0.05, 0.03), quat_from_euler_zyx(0.1, -0.2, 0.3)),
    ];
    let mut x = FilterState::with_defaults(body, imus)?;
    let pn = ProcessNoise::new(
        ["VN300", "VN100"]
            .iter()
            .map(|n| preset_noise(n).map(|p| ImuProcessNoise::from_random_walk(p.accel_bias_rw, p.gyro_bias_rw)))
            .collect::<mimu::Result<_>>()?,
    );
    println!("{:>5} {:>24} {:>10} {:>10}", "t", "position", "sigma_p", "sigma_yaw");
    for k in 0..=5 {
        propagate_to(&mut x, 0.2 * k as f64, &pn, true, &gravity_vector())?;
        let s = x.sigmas();
        println!(
            "{:>5.1} {:>8.3}{:>8.3}{:>8.3} {:>10.4} {:>10.4}",
            x.t, x.body.position.x, x.body.position.y, x.body.position.z, s[0], s[11]
        );
    }
    Ok(())
}
