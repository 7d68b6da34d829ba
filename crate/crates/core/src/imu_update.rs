//! IMU measurement model, its Jacobians, and the EKF update.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SMatrix, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::so3::skew;
use crate::state::{
    idx, imu_offset, symmetrize, BodyState, FilterState, ImuCalibration, NoiseParams, BODY_DIM, IMU_DIM,
};

/// One IMU sample: specific force and angular rate in the sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub imu_id: usize,
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
    /// Measurement covariance, accelerometer first.
    pub noise: Matrix6<f64>,
}

impl ImuSample {
    /// Sample with the discrete white-noise covariance implied by `noise`.
    pub fn new(t: f64, imu_id: usize, accel: Vector3<f64>, gyro: Vector3<f64>, noise: &NoiseParams) -> Self {
        ImuSample {
            t,
            imu_id,
            accel,
            gyro,
            noise: measurement_covariance(noise),
        }
    }

    pub fn z(&self) -> Vector6<f64> {
        Vector6::new(
            self.accel.x,
            self.accel.y,
            self.accel.z,
            self.gyro.x,
            self.gyro.y,
            self.gyro.z,
        )
    }
}

/// `diag(sigma_a^2 I, sigma_g^2 I)` with `sigma = density * sqrt(rate)`.
pub fn measurement_covariance(noise: &NoiseParams) -> Matrix6<f64> {
    let sa = noise.accel_sigma().powi(2);
    let sg = noise.gyro_sigma().powi(2);
    Matrix6::from_diagonal(&Vector6::new(sa, sa, sa, sg, sg, sg))
}

fn check_index(x: &FilterState, i: usize) -> Result<()> {
    if i >= x.n_imus() {
        return Err(Error::BadImuIndex {
            index: i,
            count: x.n_imus(),
        });
    }
    Ok(())
}

/// Specific force at the IMU origin, body frame, before the IMU rotation.
fn lever_specific_force(b: &BodyState, r: &Vector3<f64>) -> Vector3<f64> {
    let c_gb = b.orientation.to_rot();
    c_gb.transpose() * b.specific_force
        + b.angular_accel.cross(r)
        + b.angular_rate.cross(&b.angular_rate.cross(r))
}

/// Expected accelerometer and gyroscope output of IMU `i`, biases included.
pub fn predict_imu_measurement(x: &FilterState, i: usize) -> Result<(Vector3<f64>, Vector3<f64>)> {
    check_index(x, i)?;
    Ok(imu_measurement(&x.body, &x.imus[i]))
}

/// Noise-free IMU output for a body state and a calibration.
pub fn imu_measurement(body: &BodyState, imu: &ImuCalibration) -> (Vector3<f64>, Vector3<f64>) {
    let c_bi_t = imu.orientation.to_rot().transpose();
    let accel = c_bi_t * lever_specific_force(body, &imu.position) + imu.accel_bias;
    let gyro = c_bi_t * body.angular_rate + imu.gyro_bias;
    (accel, gyro)
}

pub type BodyJacobian = SMatrix<f64, 6, BODY_DIM>;
pub type CalibJacobian = SMatrix<f64, 6, IMU_DIM>;

/// Jacobian of IMU `i`'s measurement with respect to the body error state.
#[allow(non_snake_case)]
pub fn compute_H_body(x: &FilterState, i: usize) -> Result<BodyJacobian> {
    check_index(x, i)?;
    let b = &x.body;
    let imu = &x.imus[i];
    let c_bi_t = imu.orientation.to_rot().transpose();
    let c_gb_t = b.orientation.to_rot().transpose();
    let r = &imu.position;
    let w = &b.angular_rate;

    let mut h = BodyJacobian::zeros();
    h.fixed_view_mut::<3, 3>(0, idx::ACC).copy_from(&(c_bi_t * c_gb_t));
    h.fixed_view_mut::<3, 3>(0, idx::ATT)
        .copy_from(&(c_bi_t * skew(&(c_gb_t * b.specific_force))));
    let d_rate = skew(w) * skew(r).transpose() + skew(&w.cross(r)).transpose();
    h.fixed_view_mut::<3, 3>(0, idx::RATE).copy_from(&(c_bi_t * d_rate));
    h.fixed_view_mut::<3, 3>(0, idx::ANG_ACC)
        .copy_from(&(c_bi_t * skew(r).transpose()));
    h.fixed_view_mut::<3, 3>(3, idx::RATE).copy_from(&c_bi_t);
    Ok(h)
}

/// Jacobian of IMU `i`'s measurement with respect to its own calibration
/// block. Extrinsic columns of a pinned IMU are zero.
#[allow(non_snake_case)]
pub fn compute_H_calib(x: &FilterState, i: usize) -> Result<CalibJacobian> {
    check_index(x, i)?;
    let b = &x.body;
    let imu = &x.imus[i];
    let c_bi_t = imu.orientation.to_rot().transpose();
    let mut h = CalibJacobian::zeros();
    if !imu.pinned {
        let ww = skew(&b.angular_rate);
        h.fixed_view_mut::<3, 3>(0, idx::EXT_POS)
            .copy_from(&(c_bi_t * (skew(&b.angular_accel) + ww * ww)));
        h.fixed_view_mut::<3, 3>(0, idx::EXT_ROT)
            .copy_from(&skew(&(c_bi_t * lever_specific_force(&x.body, &x.imus[i].position))));
        h.fixed_view_mut::<3, 3>(3, idx::EXT_ROT)
            .copy_from(&skew(&(c_bi_t * b.angular_rate)));
    }
    h.fixed_view_mut::<3, 3>(0, idx::ACC_BIAS)
        .copy_from(&Matrix3::identity());
    h.fixed_view_mut::<3, 3>(3, idx::GYRO_BIAS)
        .copy_from(&Matrix3::identity());
    Ok(h)
}

/// Full `6 x dim` Jacobian `[H_body | 0 .. H_calib(i) .. 0]`; calibration
/// columns stay zero unless `calibrating`.
pub fn imu_jacobian(x: &FilterState, i: usize, calibrating: bool) -> Result<DMatrix<f64>> {
    let mut h = DMatrix::zeros(6, x.dim());
    h.view_mut((0, 0), (6, BODY_DIM))
        .copy_from(&compute_H_body(x, i)?);
    if calibrating {
        h.view_mut((0, imu_offset(i)), (6, IMU_DIM))
            .copy_from(&compute_H_calib(x, i)?);
    }
    Ok(h)
}

/// Innovation `z - h(x)` of a sample.
pub fn imu_innovation(x: &FilterState, z: &ImuSample) -> Result<DVector<f64>> {
    let (a, w) = predict_imu_measurement(x, z.imu_id)?;
    let r = z.z() - Vector6::new(a.x, a.y, a.z, w.x, w.y, w.z);
    Ok(DVector::from_column_slice(r.as_slice()))
}

/// Squared Mahalanobis distance `r^T S^-1 r` of an innovation.
#[allow(non_snake_case)]
pub fn mahalanobis_sq(x: &FilterState, H: &DMatrix<f64>, r: &DVector<f64>, R: &DMatrix<f64>) -> Result<f64> {
    let s = H * &x.cov * H.transpose() + R;
    let chol = s.cholesky().ok_or(Error::SingularInnovation)?;
    Ok(r.dot(&chol.solve(r)))
}

/// Chi-square innovation gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquareGate {
    pub threshold: f64,
}

impl ChiSquareGate {
    /// Gate at the given acceptance probability for `dof` degrees of freedom.
    pub fn at_probability(p: f64, dof: usize) -> Self {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let dist = ChiSquared::new(dof as f64).expect("dof > 0");
        ChiSquareGate {
            threshold: dist.inverse_cdf(p),
        }
    }

    pub fn accepts(&self, d2: f64) -> bool {
        d2 <= self.threshold
    }
}

/// EKF update in place: gain `P H^T (H P H^T + R)^-1`, multiplicative
/// injection of `K r`, Joseph-form covariance, symmetrized. Returns the
/// normalized innovation squared `r^T S^-1 r`.
///
/// The Joseph form `(I - K H) P (I - K H)^T + K R K^T` is evaluated in its
/// expanded form `P - K U^T - U K^T + K S K^T` with `U = P H^T`, which is the
/// same identity for any gain at `O(n^2 m)` cost.
#[allow(non_snake_case)]
pub fn apply_update(x: &mut FilterState, H: &DMatrix<f64>, r: &DVector<f64>, R: &DMatrix<f64>) -> Result<f64> {
    let n = x.dim();
    let m = H.nrows();
    if H.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: H.ncols(),
        });
    }
    if r.len() != m || R.nrows() != m || R.ncols() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: if r.len() != m { r.len() } else { R.nrows() },
        });
    }
    let u = &x.cov * H.transpose();
    let mut s = H * &u + R;
    symmetrize(&mut s);
    let chol = s.clone().cholesky().ok_or(Error::SingularInnovation)?;
    // K = P H^T S^-1, computed as (S^-1 H P)^T
    let k = chol.solve(&u.transpose()).transpose();
    let dx = &k * r;
    let nis = r.dot(&chol.solve(r));
    if dx.iter().any(|v| !v.is_finite()) || !nis.is_finite() {
        return Err(Error::NonFinite);
    }

    let ks = &k * &s;
    let mut p = x.cov.clone();
    p.gemm(-1.0, &k, &u.transpose(), 1.0);
    p.gemm(-1.0, &u, &k.transpose(), 1.0);
    p.gemm(1.0, &ks, &k.transpose(), 1.0);
    symmetrize(&mut p);
    x.cov = p;
    x.inject(&dx)?;
    Ok(nis)
}

/// Functional form of [`apply_update`].
#[allow(non_snake_case)]
pub fn ekf_update(x: &FilterState, H: &DMatrix<f64>, r: &DVector<f64>, R: &DMatrix<f64>) -> Result<FilterState> {
    let mut out = x.clone();
    apply_update(&mut out, H, r, R)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::quat_from_euler_zyx;
    use crate::state::{inject_error, preset_noise, BodyState, ImuCalibration, GRAVITY};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v3(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-s..s),
            rng.random_range(-s..s),
            rng.random_range(-s..s),
        )
    }

    fn random_state(rng: &mut ChaCha8Rng, n: usize) -> FilterState {
        let body = BodyState {
            position: v3(rng, 5.0),
            velocity: v3(rng, 2.0),
            specific_force: v3(rng, 3.0) + Vector3::new(0.0, 0.0, GRAVITY),
            orientation: quat_from_euler_zyx(
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.5..1.5),
                rng.random_range(-3.0..3.0),
            ),
            angular_rate: v3(rng, 1.5),
            angular_accel: v3(rng, 2.0),
        };
        let mut imus = vec![ImuCalibration::reference().with_biases(v3(rng, 0.1), v3(rng, 0.01))];
        for _ in 1..n {
            imus.push(
                ImuCalibration::new(
                    v3(rng, 0.3),
                    quat_from_euler_zyx(
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-1.5..1.5),
                        rng.random_range(-3.0..3.0),
                    ),
                )
                .with_biases(v3(rng, 0.1), v3(rng, 0.01)),
            );
        }
        FilterState::with_defaults(body, imus).unwrap()
    }

    fn measurement_vec(x: &FilterState, i: usize) -> DVector<f64> {
        let (a, w) = predict_imu_measurement(x, i).unwrap();
        DVector::from_vec(vec![a.x, a.y, a.z, w.x, w.y, w.z])
    }

    fn numerical_jacobian(x: &FilterState, i: usize) -> DMatrix<f64> {
        let n = x.dim();
        let h = 1e-6;
        let mut out = DMatrix::zeros(6, n);
        for j in 0..n {
            let mut d = DVector::zeros(n);
            d[j] = h;
            let p = measurement_vec(&inject_error(x, &d).unwrap(), i);
            let m = measurement_vec(&inject_error(x, &(-&d)).unwrap(), i);
            out.set_column(j, &((p - m) / (2.0 * h)));
        }
        out
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax() / a.amax().max(1.0)
    }

    #[test]
    fn stationary_level_imu_reads_gravity() {
        let x = FilterState::with_defaults(BodyState::default(), vec![ImuCalibration::reference()]).unwrap();
        let (a, w) = predict_imu_measurement(&x, 0).unwrap();
        assert!((a - Vector3::new(0.0, 0.0, 9.80665)).norm() < 1e-15);
        assert_eq!(w, Vector3::zeros());
    }

    #[test]
    fn pure_spin_gives_centripetal_term() {
        let body = BodyState {
            specific_force: Vector3::zeros(),
            angular_rate: Vector3::new(0.0, 0.0, 2.0),
            ..BodyState::default()
        };
        let imus = vec![
            ImuCalibration::reference(),
            ImuCalibration::new(Vector3::new(0.1, 0.0, 0.0), Default::default()),
        ];
        let x = FilterState::with_defaults(body, imus).unwrap();
        let (a, _) = predict_imu_measurement(&x, 1).unwrap();
        assert!((a - Vector3::new(-0.4, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn gyro_bias_passes_through() {
        let body = BodyState {
            specific_force: Vector3::zeros(),
            ..BodyState::default()
        };
        let imu = ImuCalibration::reference().with_biases(Vector3::zeros(), Vector3::new(0.01, 0.0, 0.0));
        let x = FilterState::with_defaults(body, vec![imu]).unwrap();
        let (_, w) = predict_imu_measurement(&x, 0).unwrap();
        assert_eq!(w, Vector3::new(0.01, 0.0, 0.0));
    }

    #[test]
    fn bad_index_rejected() {
        let x = random_state(&mut ChaCha8Rng::seed_from_u64(1), 2);
        assert!(matches!(predict_imu_measurement(&x, 2), Err(Error::BadImuIndex { .. })));
        assert!(compute_H_body(&x, 5).is_err());
        assert!(compute_H_calib(&x, 5).is_err());
    }

    #[test]
    fn body_jacobian_closed_forms() {
        let imus = vec![
            ImuCalibration::reference(),
            ImuCalibration::new(Vector3::new(0.1, 0.0, 0.0), Default::default()),
        ];
        let x = FilterState::with_defaults(BodyState::default(), imus).unwrap();
        let h = compute_H_body(&x, 1).unwrap();
        assert_eq!(h.fixed_view::<3, 3>(0, idx::ACC).into_owned(), Matrix3::identity());
        assert_eq!(
            h.fixed_view::<3, 3>(0, idx::ANG_ACC).into_owned(),
            skew(&Vector3::new(0.1, 0.0, 0.0)).transpose()
        );
        // position and velocity never enter
        assert!(h.columns(0, 6).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn calibration_jacobian_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_state(&mut rng, 3);
        for i in 0..3 {
            let h = compute_H_calib(&x, i).unwrap();
            assert_eq!(h.fixed_view::<3, 3>(0, idx::ACC_BIAS).into_owned(), Matrix3::identity());
            assert_eq!(h.fixed_view::<3, 3>(3, idx::GYRO_BIAS).into_owned(), Matrix3::identity());
        }
        let h0 = compute_H_calib(&x, 0).unwrap();
        assert!(h0.columns(0, 6).iter().all(|v| *v == 0.0));

        let body = BodyState::default();
        let imus = vec![
            ImuCalibration::reference(),
            ImuCalibration::new(Vector3::new(0.1, 0.2, 0.0), quat_from_euler_zyx(0.1, 0.2, 0.3)),
        ];
        let x = FilterState::with_defaults(body, imus).unwrap();
        let h = compute_H_calib(&x, 1).unwrap();
        assert!(h.fixed_view::<3, 3>(0, idx::EXT_POS).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let mut x = random_state(&mut rng, 3);
            x.imus[0].pinned = false;
            for i in 0..3 {
                let analytic = imu_jacobian(&x, i, true).unwrap();
                let numeric = numerical_jacobian(&x, i);
                let e = rel_err(&analytic, &numeric);
                assert!(e < 1e-5, "imu {i}: {e}");
            }
        }
    }

    #[test]
    fn non_calibrating_jacobian_has_zero_calibration_columns() {
        let x = random_state(&mut ChaCha8Rng::seed_from_u64(4), 2);
        let h = imu_jacobian(&x, 1, false).unwrap();
        assert!(h.columns(BODY_DIM, 24).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_kalman_update() {
        // 1-d check through a 30-dim state: only position x has variance
        let mut x = FilterState::with_defaults(BodyState::default(), vec![ImuCalibration::reference()]).unwrap();
        x.cov = DMatrix::zeros(30, 30);
        x.cov[(0, 0)] = 1.0;
        let mut h = DMatrix::zeros(1, 30);
        h[(0, 0)] = 1.0;
        let r = DVector::from_element(1, 1.0);
        let big_r = DMatrix::from_element(1, 1, 1.0);
        let y = ekf_update(&x, &h, &r, &big_r).unwrap();
        assert!((y.body.position.x - 0.5).abs() < 1e-15);
        assert!((y.cov[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_innovation_keeps_state_and_shrinks_covariance() {
        let x = random_state(&mut ChaCha8Rng::seed_from_u64(5), 2);
        let h = imu_jacobian(&x, 1, true).unwrap();
        let big_r = DMatrix::from_diagonal_element(6, 6, 1e-4);
        let y = ekf_update(&x, &h, &DVector::zeros(6), &big_r).unwrap();
        assert_eq!(x.body, y.body);
        assert_eq!(x.imus, y.imus);
        assert!(y.cov.trace() < x.cov.trace());
    }

    #[test]
    fn update_never_increases_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let mut x = random_state(&mut rng, 2);
            let n = x.dim();
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            x.cov = &a * a.transpose() * rng.random_range(1e-4..1.0);
            let m = rng.random_range(1..8);
            let h = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
            let b = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
            let big_r = &b * b.transpose() + DMatrix::identity(m, m) * 1e-3;
            let r = DVector::from_fn(m, |_, _| rng.random_range(-1e-3..1e-3));
            let before = x.cov.trace();
            apply_update(&mut x, &h, &r, &big_r).unwrap();
            assert!(x.cov.trace() <= before * (1.0 + 1e-12));
            crate::state::check_covariance(&x.cov).unwrap();
        }
    }

    #[test]
    fn covariance_matches_literal_joseph() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut x = random_state(&mut rng, 2);
        let n = x.dim();
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        x.cov = &a * a.transpose() * 0.01;
        let h = imu_jacobian(&x, 1, true).unwrap();
        let big_r = DMatrix::from_diagonal_element(6, 6, 1e-3);
        let r = DVector::from_fn(6, |_, _| rng.random_range(-1e-2..1e-2));
        let s = &h * &x.cov * h.transpose() + &big_r;
        let k = &x.cov * h.transpose() * s.clone().try_inverse().unwrap();
        let ikh = DMatrix::identity(n, n) - &k * &h;
        let joseph = &ikh * &x.cov * ikh.transpose() + &k * &big_r * k.transpose();
        let d2 = mahalanobis_sq(&x, &h, &r, &big_r).unwrap();
        let nis = apply_update(&mut x, &h, &r, &big_r).unwrap();
        assert!((&x.cov - &joseph).amax() < 1e-12 * joseph.amax());
        assert!((nis - d2).abs() < 1e-9 * d2);
    }

    #[test]
    fn singular_innovation_is_reported() {
        let mut x = random_state(&mut ChaCha8Rng::seed_from_u64(7), 1);
        x.cov = DMatrix::zeros(30, 30);
        let h = DMatrix::zeros(2, 30);
        let r = DVector::zeros(2);
        let big_r = DMatrix::zeros(2, 2);
        assert!(matches!(apply_update(&mut x, &h, &r, &big_r), Err(Error::SingularInnovation)));
        assert!(apply_update(&mut x, &DMatrix::zeros(2, 29), &r, &big_r).is_err());
    }

    #[test]
    fn chi_square_gate_threshold() {
        let gate = ChiSquareGate::at_probability(0.95, 6);
        assert!((gate.threshold - 12.592).abs() < 1e-3);
        assert!(!gate.accepts(20.0));
        assert!(gate.accepts(5.0));
    }

    #[test]
    fn covariance_from_presets() {
        let n = preset_noise("VN300").unwrap();
        let r = measurement_covariance(&n);
        let sa = 0.14 * 9.80665e-3 * 200f64.sqrt();
        assert!((r[(0, 0)] - sa * sa).abs() < 1e-18);
        assert_eq!(r[(0, 1)], 0.0);
    }
}
