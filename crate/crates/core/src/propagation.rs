//! State transition, its linearization, process noise and covariance
//! prediction between asynchronous measurements.
//!
//! The body follows a constant specific-force / constant angular-acceleration
//! model driven by process noise; calibration states are static apart from
//! bias random walks.

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector3};

use crate::error::{Error, Result};
use crate::so3::{quat_from_rotvec, quat_to_rot, right_jacobian};
use crate::state::{idx, imu_offset, symmetrize, FilterState, BODY_DIM};

/// Largest single propagation step, s. Longer gaps are split.
pub const MAX_STEP: f64 = 1.0;

pub type BodyMatrix = SMatrix<f64, BODY_DIM, BODY_DIM>;

/// Bias random-walk intensities of one IMU, per second.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuProcessNoise {
    pub accel_bias: Matrix3<f64>,
    pub gyro_bias: Matrix3<f64>,
}

impl ImuProcessNoise {
    /// Isotropic intensities from random-walk densities.
    pub fn from_random_walk(accel_rw: f64, gyro_rw: f64) -> Self {
        ImuProcessNoise {
            accel_bias: Matrix3::identity() * accel_rw * accel_rw,
            gyro_bias: Matrix3::identity() * gyro_rw * gyro_rw,
        }
    }
}

/// Continuous-time process noise intensities; `build_Q` scales them by `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessNoise {
    /// Drives the specific-force state, (m/s^2)^2/s.
    pub accel: Matrix3<f64>,
    /// Drives the angular-rate state, (rad/s)^2/s.
    pub rate: Matrix3<f64>,
    /// Drives the angular-acceleration state, (rad/s^2)^2/s. Zero by default,
    /// which leaves that slot noise-free.
    pub ang_accel: Matrix3<f64>,
    pub imus: Vec<ImuProcessNoise>,
}

impl ProcessNoise {
    pub fn new(imus: Vec<ImuProcessNoise>) -> Self {
        ProcessNoise {
            accel: Matrix3::identity(),
            rate: Matrix3::identity() * 0.1,
            ang_accel: Matrix3::zeros(),
            imus,
        }
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if !(0.0..=MAX_STEP).contains(&dt) {
        return Err(Error::InvalidTimestep(dt));
    }
    Ok(())
}

/// Propagates the nominal state by `dt`; the covariance is left untouched.
pub fn predict_state(x: &FilterState, dt: f64, gravity: &Vector3<f64>) -> Result<FilterState> {
    check_dt(dt)?;
    let mut out = x.clone();
    advance_nominal(&mut out, dt, gravity);
    Ok(out)
}

fn advance_nominal(x: &mut FilterState, dt: f64, gravity: &Vector3<f64>) {
    let b = &mut x.body;
    let accel = b.specific_force + gravity;
    b.position += b.velocity * dt + accel * (0.5 * dt * dt);
    b.velocity += accel * dt;
    b.orientation = b.orientation * quat_from_rotvec(&(b.angular_rate * dt));
    b.angular_rate += b.angular_accel * dt;
    x.t += dt;
}

/// Body block of the error-state transition.
///
/// The position/velocity/specific-force chain integrates constant acceleration
/// exactly. The attitude error is body-frame and right-multiplicative, so it is
/// carried by `C(exp(w dt))^T` and picks up `Jr(w dt) dt` from a rate error.
/// Gravity is a constant in this model and does not couple into attitude.
pub fn body_transition(x: &FilterState, dt: f64) -> BodyMatrix {
    let mut f = BodyMatrix::identity();
    let i3dt = Matrix3::identity() * dt;
    let phi = x.body.angular_rate * dt;
    f.fixed_view_mut::<3, 3>(idx::POS, idx::VEL).copy_from(&i3dt);
    f.fixed_view_mut::<3, 3>(idx::POS, idx::ACC)
        .copy_from(&(Matrix3::identity() * (0.5 * dt * dt)));
    f.fixed_view_mut::<3, 3>(idx::VEL, idx::ACC).copy_from(&i3dt);
    f.fixed_view_mut::<3, 3>(idx::ATT, idx::ATT)
        .copy_from(&quat_to_rot(&quat_from_rotvec(&phi)).transpose());
    f.fixed_view_mut::<3, 3>(idx::ATT, idx::RATE)
        .copy_from(&(right_jacobian(&phi) * dt));
    f.fixed_view_mut::<3, 3>(idx::RATE, idx::ANG_ACC).copy_from(&i3dt);
    f
}

/// Full error-state transition matrix: body block, identity elsewhere.
#[allow(non_snake_case)]
pub fn compute_F(x: &FilterState, dt: f64) -> Result<DMatrix<f64>> {
    check_dt(dt)?;
    let mut f = DMatrix::identity(x.dim(), x.dim());
    f.view_mut((0, 0), (BODY_DIM, BODY_DIM))
        .copy_from(&body_transition(x, dt));
    Ok(f)
}

/// Block-diagonal discrete process noise for a step of `dt`.
///
/// IMU blocks are zero unless `calibrating`; extrinsic slots never receive
/// noise. IMUs without an entry in `pn.imus` get zero bias noise.
#[allow(non_snake_case)]
pub fn build_Q(pn: &ProcessNoise, n_imus: usize, dt: f64, calibrating: bool) -> Result<DMatrix<f64>> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidTimestep(dt));
    }
    let dim = crate::state::error_dim(n_imus)?;
    let mut q = DMatrix::zeros(dim, dim);
    q.fixed_view_mut::<3, 3>(idx::ACC, idx::ACC).copy_from(&(pn.accel * dt));
    q.fixed_view_mut::<3, 3>(idx::RATE, idx::RATE).copy_from(&(pn.rate * dt));
    q.fixed_view_mut::<3, 3>(idx::ANG_ACC, idx::ANG_ACC)
        .copy_from(&(pn.ang_accel * dt));
    if calibrating {
        for (i, imu) in pn.imus.iter().take(n_imus).enumerate() {
            let o = imu_offset(i);
            q.fixed_view_mut::<3, 3>(o + idx::ACC_BIAS, o + idx::ACC_BIAS)
                .copy_from(&(imu.accel_bias * dt));
            q.fixed_view_mut::<3, 3>(o + idx::GYRO_BIAS, o + idx::GYRO_BIAS)
                .copy_from(&(imu.gyro_bias * dt));
        }
    }
    Ok(q)
}

/// `F P F^T + F Q F^T`, symmetrized.
#[allow(non_snake_case)]
pub fn predict_covariance(P: &DMatrix<f64>, F: &DMatrix<f64>, Q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = P.nrows();
    for m in [P, F, Q] {
        if m.nrows() != n || m.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: if m.nrows() != n { m.nrows() } else { m.ncols() },
            });
        }
    }
    let mut out = F * P * F.transpose() + F * Q * F.transpose();
    symmetrize(&mut out);
    Ok(out)
}

/// One propagation step of state and covariance (`dt <= MAX_STEP`), using the
/// block structure of `F` and `Q`. Equivalent to `predict_covariance` with the
/// dense matrices.
pub fn propagate_step(
    x: &mut FilterState,
    dt: f64,
    pn: &ProcessNoise,
    calibrating: bool,
    gravity: &Vector3<f64>,
) -> Result<()> {
    check_dt(dt)?;
    if dt == 0.0 {
        return Ok(());
    }
    let fb = body_transition(x, dt);
    let n = x.dim();
    let p = &mut x.cov;

    // F (P + Q) F^T with Q block diagonal.
    let add = |p: &mut DMatrix<f64>, o: usize, m: &Matrix3<f64>| {
        let mut v = p.fixed_view_mut::<3, 3>(o, o);
        v += m * dt;
    };
    add(p, idx::ACC, &pn.accel);
    add(p, idx::RATE, &pn.rate);
    add(p, idx::ANG_ACC, &pn.ang_accel);
    if calibrating {
        for (i, imu) in pn.imus.iter().take(x.imus.len()).enumerate() {
            let o = imu_offset(i);
            add(p, o + idx::ACC_BIAS, &imu.accel_bias);
            add(p, o + idx::GYRO_BIAS, &imu.gyro_bias);
        }
    }

    let pbb: BodyMatrix = p.fixed_view::<BODY_DIM, BODY_DIM>(0, 0).into_owned();
    let pbb = fb * pbb * fb.transpose();
    p.fixed_view_mut::<BODY_DIM, BODY_DIM>(0, 0).copy_from(&pbb);
    if n > BODY_DIM {
        let rest = n - BODY_DIM;
        let pbc = fb * p.view((0, BODY_DIM), (BODY_DIM, rest));
        p.view_mut((0, BODY_DIM), (BODY_DIM, rest)).copy_from(&pbc);
        p.view_mut((BODY_DIM, 0), (rest, BODY_DIM))
            .copy_from(&pbc.transpose());
    }
    symmetrize(p);
    advance_nominal(x, dt, gravity);
    Ok(())
}

/// Propagates to absolute time `t`, splitting gaps longer than `MAX_STEP`.
pub fn propagate_to(
    x: &mut FilterState,
    t: f64,
    pn: &ProcessNoise,
    calibrating: bool,
    gravity: &Vector3<f64>,
) -> Result<()> {
    let mut remaining = t - x.t;
    if remaining < 0.0 {
        return Err(Error::InvalidTimestep(remaining));
    }
    while remaining > 0.0 {
        let dt = remaining.min(MAX_STEP);
        propagate_step(x, dt, pn, calibrating, gravity)?;
        remaining -= dt;
    }
    // land exactly on t
    x.t = t;
    Ok(())
}
