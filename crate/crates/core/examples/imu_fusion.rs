//! Two IMUs as measurements of one body state. The second IMU starts with a
//! wrong gyro bias estimate. Without a camera only the bias difference
//! between the IMUs is observable; the updates pull it to the truth.

use mimu::filter::{FilterOptions, MultiImuFilter};
use mimu::propagation::{ImuProcessNoise, ProcessNoise};
use mimu::sim::{gen_trajectory, sample_imu, TrajectoryBounds};
use mimu::state::{FilterState, ImuCalibration, ImuPreset};
use mimu::so3::quat_from_rotvec;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mimu::Result<()> {
    let traj = gen_trajectory(1, &TrajectoryBounds::default())?;
    let noise = [ImuPreset::Vn300.noise(), ImuPreset::Vn100.noise()];
    let truth = [
        ImuCalibration::reference().with_biases(Vector3::zeros(), Vector3::new(0.002, -0.001, 0.0)),
        ImuCalibration::new(Vector3::new(0.1, -0.05, 0.03), quat_from_rotvec(&Vector3::new(0.1, -0.2, 0.3)))
            .with_biases(Vector3::zeros(), Vector3::new(-0.004, 0.003, 0.005)),
    ];
    let mut initial = truth.to_vec();
    initial[1].gyro_bias = Vector3::zeros();

    let mut state = FilterState::with_defaults(traj.body_state(0.0), initial)?;
    state.cov.view_mut((0, 0), (18, 18)).fill_with_identity();
    state.cov.view_mut((0, 0), (18, 18)).scale_mut(1e-6);
    let pn = ProcessNoise {
        accel: nalgebra::Matrix3::identity() * 30.0,
        ang_accel: nalgebra::Matrix3::identity() * 1e4,
        ..ProcessNoise::new(noise.iter().map(|n| ImuProcessNoise::from_random_walk(n.accel_bias_rw, n.gyro_bias_rw)).collect())
    };
    let mut filter = MultiImuFilter::new(state, pn, FilterOptions::default());
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let dt = 1.0 / noise[0].rate_hz;
    for k in 1..=(10.0 / dt) as usize {
        let t = k as f64 * dt;
        for i in 0..2 {
            let z = sample_imu(&traj, t, i, &truth[i], &noise[i], Some(&mut rng));
            filter.process_imu(&z)?;
        }
        if k % (2.0 / dt) as usize == 0 {
            let b = filter.state.imus[1].gyro_bias - filter.state.imus[0].gyro_bias;
            println!("t = {t:4.1} s  gyro bias difference: [{:+.4} {:+.4} {:+.4}] rad/s", b.x, b.y, b.z);
        }
    }
    let b = truth[1].gyro_bias - truth[0].gyro_bias;
    println!("truth:                   [{:+.4} {:+.4} {:+.4}]", b.x, b.y, b.z);
    Ok(())
}
