//! Filter state, error-state layout and covariance bookkeeping.
//!
//! The error state is laid out as
//! `[dp dv da dtheta domega dalpha | per IMU: dp_BI dtheta_BI db_a db_w]`.
//! Every IMU carries a full 12-dimensional block; IMU 0 defines the body frame,
//! so its extrinsic sub-block is pinned (identity, zero covariance).

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::so3::{quat_from_rotvec, rotvec_from_quat, Quat};

/// Standard gravity, m/s^2.
pub const GRAVITY: f64 = 9.80665;

/// Gravity in the global frame (z up).
pub fn gravity_vector() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -GRAVITY)
}

pub const BODY_DIM: usize = 18;
pub const IMU_DIM: usize = 12;

/// Offsets into the error state.
pub mod idx {
    pub const POS: usize = 0;
    pub const VEL: usize = 3;
    pub const ACC: usize = 6;
    pub const ATT: usize = 9;
    pub const RATE: usize = 12;
    pub const ANG_ACC: usize = 15;

    // within an IMU block
    pub const EXT_POS: usize = 0;
    pub const EXT_ROT: usize = 3;
    pub const ACC_BIAS: usize = 6;
    pub const GYRO_BIAS: usize = 9;
}

/// Size of the error state for `n_imus` IMUs (IMU 0 included).
pub fn error_dim(n_imus: usize) -> Result<usize> {
    if n_imus == 0 {
        return Err(Error::NoImus);
    }
    Ok(BODY_DIM + IMU_DIM * n_imus)
}

/// First error-state index of IMU `i`'s calibration block.
pub fn imu_offset(i: usize) -> usize {
    BODY_DIM + IMU_DIM * i
}

/// Kinematic state of the body frame.
///
/// `specific_force` is the global-frame specific force, so the velocity obeys
/// `v_dot = specific_force + g`. Rates are expressed in the body frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub specific_force: Vector3<f64>,
    /// Body to global.
    pub orientation: Quat,
    pub angular_rate: Vector3<f64>,
    pub angular_accel: Vector3<f64>,
}

impl Default for BodyState {
    /// At rest, level, at the origin.
    fn default() -> Self {
        BodyState {
            position: Vector3::zeros(),
            velocity: Vector3::zeros(),
            specific_force: -gravity_vector(),
            orientation: Quat::identity(),
            angular_rate: Vector3::zeros(),
            angular_accel: Vector3::zeros(),
        }
    }
}

impl BodyState {
    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.specific_force.iter().all(|v| v.is_finite())
            && self.orientation.is_finite()
            && self.angular_rate.iter().all(|v| v.is_finite())
            && self.angular_accel.iter().all(|v| v.is_finite())
    }
}

/// Extrinsic and intrinsic calibration of one IMU.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuCalibration {
    /// IMU origin in the body frame.
    pub position: Vector3<f64>,
    /// IMU to body.
    pub orientation: Quat,
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    /// Extrinsics fixed at identity (the body-defining IMU).
    pub pinned: bool,
}

impl ImuCalibration {
    /// The body-defining IMU: identity extrinsics, pinned.
    pub fn reference() -> Self {
        ImuCalibration {
            position: Vector3::zeros(),
            orientation: Quat::identity(),
            accel_bias: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            pinned: true,
        }
    }

    pub fn new(position: Vector3<f64>, orientation: Quat) -> Self {
        ImuCalibration {
            position,
            orientation,
            accel_bias: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            pinned: false,
        }
    }

    pub fn with_biases(mut self, accel: Vector3<f64>, gyro: Vector3<f64>) -> Self {
        self.accel_bias = accel;
        self.gyro_bias = gyro;
        self
    }

    fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.orientation.is_finite()
            && self.accel_bias.iter().all(|v| v.is_finite())
            && self.gyro_bias.iter().all(|v| v.is_finite())
    }
}

/// Initial standard deviations of the body error state.
#[derive(Debug, Clone, PartialEq)]
pub struct BodySigma {
    pub position: f64,
    pub velocity: f64,
    pub specific_force: f64,
    pub attitude: f64,
    pub angular_rate: f64,
    pub angular_accel: f64,
}

impl Default for BodySigma {
    fn default() -> Self {
        BodySigma {
            position: 0.0,
            velocity: 0.0,
            specific_force: 1.0,
            attitude: 0.0,
            angular_rate: 0.1f64.sqrt(),
            angular_accel: 1.0,
        }
    }
}

/// Initial standard deviations of one IMU's calibration error.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuSigma {
    pub position: f64,
    pub orientation: f64,
    pub accel_bias: f64,
    pub gyro_bias: f64,
}

impl Default for ImuSigma {
    fn default() -> Self {
        ImuSigma {
            position: 0.02,
            orientation: 5f64.to_radians(),
            accel_bias: 0.1,
            gyro_bias: 0.01,
        }
    }
}

impl ImuSigma {
    pub fn zero() -> Self {
        ImuSigma {
            position: 0.0,
            orientation: 0.0,
            accel_bias: 0.0,
            gyro_bias: 0.0,
        }
    }
}

/// Nominal state plus error-state covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub body: BodyState,
    pub imus: Vec<ImuCalibration>,
    pub cov: DMatrix<f64>,
    pub t: f64,
}

impl FilterState {
    /// Builds a state with a diagonal initial covariance. Pinned blocks get
    /// zero extrinsic variance regardless of `imu_sigmas`.
    pub fn new(
        body: BodyState,
        imus: Vec<ImuCalibration>,
        body_sigma: &BodySigma,
        imu_sigmas: &[ImuSigma],
    ) -> Result<Self> {
        let dim = error_dim(imus.len())?;
        if imu_sigmas.len() != imus.len() {
            return Err(Error::DimensionMismatch {
                expected: imus.len(),
                got: imu_sigmas.len(),
            });
        }
        let mut diag = DVector::zeros(dim);
        let mut fill = |start: usize, sigma: f64| {
            for k in start..start + 3 {
                diag[k] = sigma * sigma;
            }
        };
        fill(idx::POS, body_sigma.position);
        fill(idx::VEL, body_sigma.velocity);
        fill(idx::ACC, body_sigma.specific_force);
        fill(idx::ATT, body_sigma.attitude);
        fill(idx::RATE, body_sigma.angular_rate);
        fill(idx::ANG_ACC, body_sigma.angular_accel);
        for (i, (imu, s)) in imus.iter().zip(imu_sigmas).enumerate() {
            let o = imu_offset(i);
            if !imu.pinned {
                fill(o + idx::EXT_POS, s.position);
                fill(o + idx::EXT_ROT, s.orientation);
            }
            fill(o + idx::ACC_BIAS, s.accel_bias);
            fill(o + idx::GYRO_BIAS, s.gyro_bias);
        }
        let mut imus = imus;
        for imu in imus.iter_mut().filter(|c| c.pinned) {
            imu.position = Vector3::zeros();
            imu.orientation = Quat::identity();
        }
        Ok(FilterState {
            body,
            imus,
            cov: DMatrix::from_diagonal(&diag),
            t: 0.0,
        })
    }

    /// Default uncertainties; IMU 0 pinned, the rest free.
    pub fn with_defaults(body: BodyState, imus: Vec<ImuCalibration>) -> Result<Self> {
        let sigmas = vec![ImuSigma::default(); imus.len()];
        Self::new(body, imus, &BodySigma::default(), &sigmas)
    }

    pub fn n_imus(&self) -> usize {
        self.imus.len()
    }

    pub fn dim(&self) -> usize {
        BODY_DIM + IMU_DIM * self.imus.len()
    }

    pub fn is_finite(&self) -> bool {
        self.body.is_finite()
            && self.imus.iter().all(ImuCalibration::is_finite)
            && self.cov.iter().all(|v| v.is_finite())
    }

    /// Applies an error-state correction in place.
    pub fn inject(&mut self, dx: &DVector<f64>) -> Result<()> {
        if dx.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: dx.len(),
            });
        }
        let seg = |o: usize| Vector3::new(dx[o], dx[o + 1], dx[o + 2]);
        let b = &mut self.body;
        b.position += seg(idx::POS);
        b.velocity += seg(idx::VEL);
        b.specific_force += seg(idx::ACC);
        b.orientation = b.orientation * quat_from_rotvec(&seg(idx::ATT));
        b.angular_rate += seg(idx::RATE);
        b.angular_accel += seg(idx::ANG_ACC);
        for (i, imu) in self.imus.iter_mut().enumerate() {
            let o = imu_offset(i);
            if !imu.pinned {
                imu.position += seg(o + idx::EXT_POS);
                imu.orientation = imu.orientation * quat_from_rotvec(&seg(o + idx::EXT_ROT));
            }
            imu.accel_bias += seg(o + idx::ACC_BIAS);
            imu.gyro_bias += seg(o + idx::GYRO_BIAS);
        }
        Ok(())
    }

    /// Zeroes the covariance rows and columns of pinned extrinsics.
    pub fn enforce_pins(&mut self) {
        let n = self.dim();
        for (i, imu) in self.imus.iter().enumerate() {
            if !imu.pinned {
                continue;
            }
            let o = imu_offset(i);
            for k in o..o + 6 {
                for j in 0..n {
                    self.cov[(k, j)] = 0.0;
                    self.cov[(j, k)] = 0.0;
                }
            }
        }
    }

    /// Standard deviations of every error-state component.
    pub fn sigmas(&self) -> DVector<f64> {
        self.cov.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

/// Returns `x` corrected by `dx`: vector states additively, quaternions by
/// right-multiplication with the exponential of their rotation-vector entry.
pub fn inject_error(x: &FilterState, dx: &DVector<f64>) -> Result<FilterState> {
    let mut out = x.clone();
    out.inject(dx)?;
    Ok(out)
}

/// Error-state difference `a [-] b`, so that `inject_error(b, d) == a` to first
/// order. Covariances are ignored.
pub fn state_difference(a: &FilterState, b: &FilterState) -> Result<DVector<f64>> {
    if a.n_imus() != b.n_imus() {
        return Err(Error::DimensionMismatch {
            expected: b.dim(),
            got: a.dim(),
        });
    }
    let mut d = DVector::zeros(a.dim());
    let mut put = |o: usize, v: Vector3<f64>| d.fixed_rows_mut::<3>(o).copy_from(&v);
    put(idx::POS, a.body.position - b.body.position);
    put(idx::VEL, a.body.velocity - b.body.velocity);
    put(idx::ACC, a.body.specific_force - b.body.specific_force);
    put(idx::ATT, rotvec_from_quat(&(b.body.orientation.inverse() * a.body.orientation)));
    put(idx::RATE, a.body.angular_rate - b.body.angular_rate);
    put(idx::ANG_ACC, a.body.angular_accel - b.body.angular_accel);
    for (i, (ia, ib)) in a.imus.iter().zip(&b.imus).enumerate() {
        let o = imu_offset(i);
        put(o + idx::EXT_POS, ia.position - ib.position);
        put(o + idx::EXT_ROT, rotvec_from_quat(&(ib.orientation.inverse() * ia.orientation)));
        put(o + idx::ACC_BIAS, ia.accel_bias - ib.accel_bias);
        put(o + idx::GYRO_BIAS, ia.gyro_bias - ib.gyro_bias);
    }
    Ok(d)
}

/// `(P + P^T) / 2` in place.
pub fn symmetrize(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let m = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = m;
            p[(j, i)] = m;
        }
    }
}

/// Symmetry within `1e-12 * |P|_inf` and smallest eigenvalue above `-1e-9`.
pub fn check_covariance(p: &DMatrix<f64>) -> Result<()> {
    if !p.is_square() {
        return Err(Error::UnhealthyCovariance("not square".into()));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::UnhealthyCovariance("non-finite entry".into()));
    }
    let scale = p.row_iter().map(|r| r.abs().sum()).fold(0.0, f64::max);
    let asym = (p - p.transpose()).amax();
    if asym > 1e-12 * scale {
        return Err(Error::UnhealthyCovariance(format!(
            "asymmetry {asym:e} exceeds {:e}",
            1e-12 * scale
        )));
    }
    // P + 1e-9 I positive definite already proves the eigenvalue floor
    let mut shifted = p.clone();
    for i in 0..shifted.nrows() {
        shifted[(i, i)] += 1e-9;
    }
    if shifted.cholesky().is_some() {
        return Ok(());
    }
    let min_eig = min_eigenvalue(p);
    if min_eig < -1e-9 {
        return Err(Error::UnhealthyCovariance(format!(
            "minimum eigenvalue {min_eig:e}"
        )));
    }
    Ok(())
}

pub fn min_eigenvalue(p: &DMatrix<f64>) -> f64 {
    let sym = (p + p.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// White-noise and bias random-walk densities of one IMU.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseParams {
    /// m/s^2/sqrt(Hz)
    pub accel_density: f64,
    /// rad/s/sqrt(Hz)
    pub gyro_density: f64,
    /// m/s^2/sqrt(s)
    pub accel_bias_rw: f64,
    /// rad/s/sqrt(s)
    pub gyro_bias_rw: f64,
    pub rate_hz: f64,
}

impl NoiseParams {
    /// Discrete per-sample accelerometer standard deviation.
    pub fn accel_sigma(&self) -> f64 {
        self.accel_density * self.rate_hz.sqrt()
    }

    pub fn gyro_sigma(&self) -> f64 {
        self.gyro_density * self.rate_hz.sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("accel_density", self.accel_density),
            ("gyro_density", self.gyro_density),
            ("accel_bias_rw", self.accel_bias_rw),
            ("gyro_bias_rw", self.gyro_bias_rw),
            ("rate_hz", self.rate_hz),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// 1 mg in m/s^2.
pub const MILLI_G: f64 = 9.80665e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ImuPreset {
    Vn300,
    Vn100,
    Deta10,
}

impl ImuPreset {
    pub fn noise(self) -> NoiseParams {
        // Bias random walks and rates are not part of the published density
        // table; they are fixed, documented defaults.
        match self {
            ImuPreset::Vn300 => NoiseParams {
                accel_density: 0.14 * MILLI_G,
                gyro_density: 0.061e-3,
                accel_bias_rw: 1e-4,
                gyro_bias_rw: 1e-5,
                rate_hz: 200.0,
            },
            ImuPreset::Vn100 => NoiseParams {
                accel_density: 0.14 * MILLI_G,
                gyro_density: 0.061e-3,
                accel_bias_rw: 1e-4,
                gyro_bias_rw: 1e-5,
                rate_hz: 100.0,
            },
            ImuPreset::Deta10 => NoiseParams {
                accel_density: 40.0 * MILLI_G,
                gyro_density: 0.049e-3,
                accel_bias_rw: 1e-3,
                gyro_bias_rw: 1e-5,
                rate_hz: 100.0,
            },
        }
    }
}

impl FromStr for ImuPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "").as_str() {
            "VN300" => Ok(ImuPreset::Vn300),
            "VN100" => Ok(ImuPreset::Vn100),
            "DETA10" => Ok(ImuPreset::Deta10),
            _ => Err(Error::UnknownPreset(s.to_string())),
        }
    }
}

impl fmt::Display for ImuPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ImuPreset::Vn300 => "VN300",
            ImuPreset::Vn100 => "VN100",
            ImuPreset::Deta10 => "DETA10",
        };
        f.write_str(name)
    }
}

pub fn preset_noise(name: &str) -> Result<NoiseParams> {
    Ok(name.parse::<ImuPreset>()?.noise())
}
