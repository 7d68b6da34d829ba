//! Classical single-IMU error-state filter: IMU 0 drives propagation and the
//! camera is the only update. Used as the comparison baseline.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3};

use crate::camera::{pose_projection_jacobian, CameraModel, CameraSample, LandmarkSet};
use crate::error::{Error, Result};
use crate::so3::{quat_from_rotvec, right_jacobian, skew, Quat};
use crate::state::NoiseParams;

pub const BASELINE_DIM: usize = 15;

/// Error-state offsets of the baseline filter.
pub mod slot {
    pub const POS: usize = 0;
    pub const VEL: usize = 3;
    pub const ATT: usize = 6;
    pub const ACC_BIAS: usize = 9;
    pub const GYRO_BIAS: usize = 12;
}

pub type BaselineMatrix = SMatrix<f64, BASELINE_DIM, BASELINE_DIM>;

#[derive(Debug, Clone, PartialEq)]
pub struct SinglePredictor {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    /// Body (IMU 0) to global.
    pub orientation: Quat,
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub cov: BaselineMatrix,
    pub t: f64,
    noise: NoiseParams,
    gravity: Vector3<f64>,
    held: Option<(Vector3<f64>, Vector3<f64>)>,
}

impl SinglePredictor {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        position: Vector3<f64>,
        velocity: Vector3<f64>,
        orientation: Quat,
        accel_bias: Vector3<f64>,
        gyro_bias: Vector3<f64>,
        sigmas: &SVector<f64, BASELINE_DIM>,
        noise: NoiseParams,
        gravity: Vector3<f64>,
    ) -> Self {
        SinglePredictor {
            position,
            velocity,
            orientation,
            accel_bias,
            gyro_bias,
            cov: BaselineMatrix::from_diagonal(&sigmas.component_mul(sigmas)),
            t: 0.0,
            noise,
            gravity,
            held: None,
        }
    }

    /// Integrates the held IMU sample up to `t`. Before the first sample the
    /// body is assumed to hold still.
    pub fn propagate_to(&mut self, t: f64) -> Result<()> {
        let dt = t - self.t;
        if dt < 0.0 || !dt.is_finite() {
            return Err(Error::InvalidTimestep(dt));
        }
        if dt == 0.0 {
            return Ok(());
        }
        let (f_body, rate) = self.held_signal();
        let c = self.orientation.to_rot();
        let phi = rate * dt;
        let f = self.transition(dt);

        let mut q = BaselineMatrix::zeros();
        let n = &self.noise;
        let fill = |q: &mut BaselineMatrix, o: usize, v: f64| {
            q.fixed_view_mut::<3, 3>(o, o).fill_diagonal(v);
        };
        fill(&mut q, slot::VEL, n.accel_density.powi(2) * dt);
        fill(&mut q, slot::ATT, n.gyro_density.powi(2) * dt);
        fill(&mut q, slot::ACC_BIAS, n.accel_bias_rw.powi(2) * dt);
        fill(&mut q, slot::GYRO_BIAS, n.gyro_bias_rw.powi(2) * dt);

        let accel_g = c * f_body + self.gravity;
        self.position += self.velocity * dt + accel_g * (0.5 * dt * dt);
        self.velocity += accel_g * dt;
        self.orientation = self.orientation * quat_from_rotvec(&phi);
        self.cov = f * self.cov * f.transpose() + q;
        self.cov = (self.cov + self.cov.transpose()) * 0.5;
        self.t = t;
        Ok(())
    }

    /// Bias-corrected specific force and rate of the held sample.
    fn held_signal(&self) -> (Vector3<f64>, Vector3<f64>) {
        let (accel, gyro) = self
            .held
            .unwrap_or((self.orientation.to_rot().transpose() * -self.gravity + self.accel_bias, self.gyro_bias));
        (accel - self.accel_bias, gyro - self.gyro_bias)
    }

    /// Error-state transition over `dt` with the held sample.
    pub fn transition(&self, dt: f64) -> BaselineMatrix {
        let (f_body, rate) = self.held_signal();
        let c = self.orientation.to_rot();
        let phi = rate * dt;
        let mut f = BaselineMatrix::identity();
        let i3 = Matrix3::identity();
        let cfx = c * skew(&f_body);
        f.fixed_view_mut::<3, 3>(slot::POS, slot::VEL).copy_from(&(i3 * dt));
        f.fixed_view_mut::<3, 3>(slot::POS, slot::ATT)
            .copy_from(&(-cfx * (0.5 * dt * dt)));
        f.fixed_view_mut::<3, 3>(slot::POS, slot::ACC_BIAS)
            .copy_from(&(-c * (0.5 * dt * dt)));
        f.fixed_view_mut::<3, 3>(slot::VEL, slot::ATT).copy_from(&(-cfx * dt));
        f.fixed_view_mut::<3, 3>(slot::VEL, slot::ACC_BIAS)
            .copy_from(&(-c * dt));
        f.fixed_view_mut::<3, 3>(slot::ATT, slot::ATT)
            .copy_from(&quat_from_rotvec(&phi).to_rot().transpose());
        f.fixed_view_mut::<3, 3>(slot::ATT, slot::GYRO_BIAS)
            .copy_from(&(-right_jacobian(&phi) * dt));
        f
    }

    /// Propagates to the sample time with the previous sample, then holds
    /// this one. Stale samples are ignored.
    pub fn process_imu(&mut self, t: f64, accel: Vector3<f64>, gyro: Vector3<f64>) -> Result<bool> {
        if t < self.t {
            return Ok(false);
        }
        self.propagate_to(t)?;
        self.held = Some((accel, gyro));
        Ok(true)
    }

    /// Joint landmark update; returns the normalized innovation squared, or
    /// `None` when nothing was usable.
    pub fn process_camera(
        &mut self,
        z: &CameraSample,
        cam: &CameraModel,
        landmarks: &LandmarkSet,
    ) -> Result<Option<f64>> {
        if z.t < self.t {
            return Ok(None);
        }
        self.propagate_to(z.t)?;
        let mut rows = Vec::with_capacity(z.observations.len());
        for (id, uv) in &z.observations {
            let l = landmarks.get(*id)?;
            if let Some((pred, j)) = pose_projection_jacobian(&self.position, &self.orientation, cam, l) {
                rows.push((uv - pred, j));
            }
        }
        if rows.is_empty() {
            return Ok(None);
        }
        let m = 2 * rows.len();
        let mut h = DMatrix::zeros(m, BASELINE_DIM);
        let mut r = DVector::zeros(m);
        for (k, (res, j)) in rows.iter().enumerate() {
            h.view_mut((2 * k, slot::POS), (2, 3))
                .copy_from(&j.fixed_view::<2, 3>(0, 0));
            h.view_mut((2 * k, slot::ATT), (2, 3))
                .copy_from(&j.fixed_view::<2, 3>(0, 3));
            r[2 * k] = res.x;
            r[2 * k + 1] = res.y;
        }
        let var = cam.pixel_noise_std.powi(2);
        let p = DMatrix::from_column_slice(BASELINE_DIM, BASELINE_DIM, self.cov.as_slice());
        let u = &p * h.transpose();
        let mut s = &h * &u;
        for i in 0..m {
            s[(i, i)] += var;
        }
        let chol = s.clone().cholesky().ok_or(Error::SingularInnovation)?;
        let k = chol.solve(&u.transpose()).transpose();
        let dx = &k * &r;
        let nis = r.dot(&chol.solve(&r));
        if dx.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        // expanded Joseph form, as in the multi-IMU filter
        let ks = &k * &s;
        let mut pn = p;
        pn.gemm(-1.0, &k, &u.transpose(), 1.0);
        pn.gemm(-1.0, &u, &k.transpose(), 1.0);
        pn.gemm(1.0, &ks, &k.transpose(), 1.0);
        self.cov = BaselineMatrix::from_column_slice(pn.as_slice());
        self.cov = (self.cov + self.cov.transpose()) * 0.5;

        let seg = |o: usize| Vector3::new(dx[o], dx[o + 1], dx[o + 2]);
        self.position += seg(slot::POS);
        self.velocity += seg(slot::VEL);
        self.orientation = self.orientation * quat_from_rotvec(&seg(slot::ATT));
        self.accel_bias += seg(slot::ACC_BIAS);
        self.gyro_bias += seg(slot::GYRO_BIAS);
        Ok(Some(nis))
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.orientation.is_finite()
            && self.cov.iter().all(|v| v.is_finite())
    }

    /// Covariance of `[dp, dtheta]`.
    pub fn pose_covariance(&self) -> SMatrix<f64, 6, 6> {
        let mut out = SMatrix::<f64, 6, 6>::zeros();
        for (a, sa) in [(0, slot::POS), (3, slot::ATT)] {
            for (b, sb) in [(0, slot::POS), (3, slot::ATT)] {
                out.fixed_view_mut::<3, 3>(a, b)
                    .copy_from(&self.cov.fixed_view::<3, 3>(sa, sb));
            }
        }
        out
    }
}
