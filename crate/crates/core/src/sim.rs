//! Closed-form 6-DoF trajectories, asynchronous sensor simulation and Monte
//! Carlo campaigns.
//!
//! Every random quantity of a run comes from a ChaCha stream keyed by the run
//! seed and a fixed stream id, so a seed fully determines the run.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DVector, Matrix3, Matrix6, SVector, Vector2, Vector3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::baseline::{SinglePredictor, BASELINE_DIM};
use crate::camera::{project_pose, CameraModel, CameraSample, LandmarkSet};
use crate::error::{Error, Result};
use crate::eval::Pose;
use crate::filter::{FilterOptions, MultiImuFilter, UpdateOutcome};
use crate::imu_update::{imu_measurement, ChiSquareGate, ImuSample};
use crate::propagation::{ImuProcessNoise, ProcessNoise};
use crate::so3::{quat_from_euler_zyx, quat_from_rotvec, rotvec_from_quat, Quat};
use crate::state::{
    gravity_vector, idx, imu_offset, BodySigma, BodyState, FilterState, ImuCalibration, ImuSigma, NoiseParams,
    GRAVITY,
};

const STREAM_TRAJECTORY: u64 = 0;
const STREAM_INIT: u64 = 1;
const STREAM_CAMERA: u64 = 2;
const STREAM_CLOCKS: u64 = 3;
const STREAM_IMU_BASE: u64 = 16;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Seed of run `index` in a campaign with `master` seed.
pub fn run_seed(master: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index as u64 + 1);
    rng.next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sinusoid {
    pub amplitude: f64,
    pub frequency_hz: f64,
    pub phase: f64,
}

impl Sinusoid {
    /// Value and first two time derivatives.
    pub fn eval(&self, t: f64) -> [f64; 3] {
        let w = TAU * self.frequency_hz;
        let (s, c) = (w * t + self.phase).sin_cos();
        [self.amplitude * s, self.amplitude * w * c, -self.amplitude * w * w * s]
    }
}

fn sum_eval(terms: &[Sinusoid], t: f64) -> [f64; 3] {
    terms.iter().fold([0.0; 3], |acc, s| {
        let v = s.eval(t);
        [acc[0] + v[0], acc[1] + v[1], acc[2] + v[2]]
    })
}

/// Limits for random trajectories. Amplitude limits bound the sum of the
/// terms on each axis.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBounds {
    pub max_position_m: f64,
    pub max_angle_rad: f64,
    pub min_frequency_hz: f64,
    pub max_frequency_hz: f64,
    pub terms: usize,
}

impl Default for TrajectoryBounds {
    fn default() -> Self {
        TrajectoryBounds {
            max_position_m: 2.0,
            max_angle_rad: 0.3,
            min_frequency_hz: 0.05,
            max_frequency_hz: 0.5,
            terms: 3,
        }
    }
}

impl TrajectoryBounds {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_position_m >= 0.0
            && self.max_angle_rad >= 0.0
            && self.min_frequency_hz > 0.0
            && self.max_frequency_hz >= self.min_frequency_hz
            && self.terms > 0
            && [self.max_position_m, self.max_angle_rad, self.max_frequency_hz]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("bad trajectory bounds {self:?}")))
        }
    }
}

/// Sum-of-sinusoids position per global axis and ZYX Euler angles
/// (roll, pitch, yaw) of the body.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryModel {
    pub position: [Vec<Sinusoid>; 3],
    pub euler: [Vec<Sinusoid>; 3],
}

impl TrajectoryModel {
    /// At rest at the origin, level.
    pub fn stationary() -> Self {
        TrajectoryModel {
            position: Default::default(),
            euler: Default::default(),
        }
    }

    fn axes(sets: &[Vec<Sinusoid>; 3], t: f64) -> [Vector3<f64>; 3] {
        let e = [sum_eval(&sets[0], t), sum_eval(&sets[1], t), sum_eval(&sets[2], t)];
        [0, 1, 2].map(|d| Vector3::new(e[0][d], e[1][d], e[2][d]))
    }

    pub fn position(&self, t: f64) -> Vector3<f64> {
        Self::axes(&self.position, t)[0]
    }

    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        Self::axes(&self.position, t)[1]
    }

    /// Kinematic acceleration, global frame.
    pub fn acceleration(&self, t: f64) -> Vector3<f64> {
        Self::axes(&self.position, t)[2]
    }

    pub fn orientation(&self, t: f64) -> Quat {
        let e = Self::axes(&self.euler, t)[0];
        quat_from_euler_zyx(e.x, e.y, e.z)
    }

    /// Body-frame angular rate and acceleration from the Euler-rate map
    /// and its time derivative.
    pub fn angular_motion(&self, t: f64) -> (Vector3<f64>, Vector3<f64>) {
        let [e, de, dde] = Self::axes(&self.euler, t);
        let (sr, cr) = e.x.sin_cos();
        let (sp, cp) = e.y.sin_cos();
        let (dr, dp, dy) = (de.x, de.y, de.z);
        let (ddr, ddp, ddy) = (dde.x, dde.y, dde.z);
        let rate = Vector3::new(
            dr - dy * sp,
            dp * cr + dy * cp * sr,
            -dp * sr + dy * cp * cr,
        );
        let accel = Vector3::new(
            ddr - ddy * sp - dy * dp * cp,
            ddp * cr - dp * dr * sr + ddy * cp * sr - dy * dp * sp * sr + dy * dr * cp * cr,
            -ddp * sr - dp * dr * cr + ddy * cp * cr - dy * dp * sp * cr - dy * dr * cp * sr,
        );
        (rate, accel)
    }

    /// Filter-convention body state at `t`: specific force is the kinematic
    /// acceleration minus gravity.
    pub fn body_state(&self, t: f64) -> BodyState {
        let [p, v, a] = Self::axes(&self.position, t);
        let (angular_rate, angular_accel) = self.angular_motion(t);
        BodyState {
            position: p,
            velocity: v,
            specific_force: a - gravity_vector(),
            orientation: self.orientation(t),
            angular_rate,
            angular_accel,
        }
    }

    pub fn pose(&self, t: f64) -> Pose {
        Pose::new(self.position(t), self.orientation(t))
    }
}

/// Random trajectory within `bounds`: each axis gets `terms` sinusoids with
/// amplitudes up to `max / terms`, uniform frequencies and phases.
pub fn gen_trajectory(seed: u64, bounds: &TrajectoryBounds) -> Result<TrajectoryModel> {
    bounds.validate()?;
    let mut rng = stream(seed, STREAM_TRAJECTORY);
    let mut set = |max: f64| -> Vec<Sinusoid> {
        (0..bounds.terms)
            .map(|_| Sinusoid {
                amplitude: rng.random::<f64>() * max / bounds.terms as f64,
                frequency_hz: rng.random_range(bounds.min_frequency_hz..=bounds.max_frequency_hz),
                phase: rng.random::<f64>() * TAU,
            })
            .collect()
    };
    let position = [
        set(bounds.max_position_m),
        set(bounds.max_position_m),
        set(bounds.max_position_m),
    ];
    let euler = [set(bounds.max_angle_rad), set(bounds.max_angle_rad), set(bounds.max_angle_rad)];
    Ok(TrajectoryModel { position, euler })
}

fn normal3(rng: &mut impl Rng) -> Vector3<f64> {
    Vector3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    )
}

/// Simulated sample of IMU `imu_id`: the exact measurement of the true state
/// plus white noise of `noise`. `rng = None` gives a noise-free sample.
pub fn sample_imu(
    traj: &TrajectoryModel,
    t: f64,
    imu_id: usize,
    true_calib: &ImuCalibration,
    noise: &NoiseParams,
    rng: Option<&mut ChaCha8Rng>,
) -> ImuSample {
    let (mut a, mut w) = imu_measurement(&traj.body_state(t), true_calib);
    if let Some(rng) = rng {
        a += normal3(rng) * noise.accel_sigma();
        w += normal3(rng) * noise.gyro_sigma();
    }
    ImuSample::new(t, imu_id, a, w, noise)
}

/// Pixels of every landmark visible from the true pose at `t`.
pub fn sample_camera(
    traj: &TrajectoryModel,
    t: f64,
    cam: &CameraModel,
    landmarks: &LandmarkSet,
    rng: Option<&mut ChaCha8Rng>,
) -> CameraSample {
    let pose = traj.pose(t);
    let mut observations: Vec<(usize, Vector2<f64>)> = landmarks
        .points()
        .iter()
        .enumerate()
        .filter_map(|(i, l)| project_pose(&pose.position, &pose.orientation, cam, l).map(|uv| (i, uv)))
        .collect();
    if let Some(rng) = rng {
        for (_, uv) in observations.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            let m: f64 = rng.sample(StandardNormal);
            *uv += Vector2::new(n, m) * cam.pixel_noise_std;
        }
    }
    CameraSample { t, observations }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FilterMode {
    /// Every IMU sample is an update of the multi-IMU filter.
    MultiUpdate,
    /// IMU 0 drives a classical error-state filter; camera updates only.
    SinglePredictor,
}

impl FromStr for FilterMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi_update" => Ok(FilterMode::MultiUpdate),
            "single_predictor" => Ok(FilterMode::SinglePredictor),
            _ => Err(Error::InvalidArgument(format!("unknown mode {s:?}"))),
        }
    }
}

impl fmt::Display for FilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterMode::MultiUpdate => "multi_update",
            FilterMode::SinglePredictor => "single_predictor",
        })
    }
}

/// One simulated IMU: noise, true calibration and the spread of the initial
/// estimate around it.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuSpec {
    pub noise: NoiseParams,
    pub position: Vector3<f64>,
    pub orientation: Quat,
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub init_error: ImuSigma,
}

impl ImuSpec {
    pub fn new(noise: NoiseParams) -> Self {
        ImuSpec {
            noise,
            position: Vector3::zeros(),
            orientation: Quat::identity(),
            accel_bias: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            init_error: ImuSigma::default(),
        }
    }

    pub fn with_extrinsics(mut self, position: Vector3<f64>, rotvec: Vector3<f64>) -> Self {
        self.position = position;
        self.orientation = quat_from_rotvec(&rotvec);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraSpec {
    pub model: CameraModel,
    pub landmarks: LandmarkSet,
}

impl Default for CameraSpec {
    fn default() -> Self {
        CameraSpec {
            model: CameraModel::default(),
            landmarks: LandmarkSet::grid(10, 10, 0.5, 5.0).expect("valid grid"),
        }
    }
}

/// Filter noise settings that are not sensor properties.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTuning {
    /// Specific-force drive, (m/s^2)^2/s.
    pub accel: f64,
    /// Angular-rate drive, (rad/s)^2/s.
    pub rate: f64,
    /// Angular-acceleration drive, (rad/s^2)^2/s.
    pub ang_accel: f64,
    pub body_sigma: BodySigma,
    /// Chi-square acceptance probability for IMU updates; `None` disables.
    pub gate_probability: Option<f64>,
}

impl Default for FilterTuning {
    fn default() -> Self {
        FilterTuning {
            accel: 60.0,
            rate: 0.1,
            ang_accel: 1e4,
            body_sigma: BodySigma::default(),
            gate_probability: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub duration_s: f64,
    pub trajectory: TrajectoryBounds,
    /// IMU 0 defines the body frame and must have identity extrinsics.
    pub imus: Vec<ImuSpec>,
    pub camera: Option<CameraSpec>,
    pub mode: FilterMode,
    pub calibrating: bool,
    /// Add white noise to sensor outputs.
    pub sensor_noise: bool,
    pub output_rate_hz: f64,
    pub tuning: FilterTuning,
    /// Check covariance health after every update.
    pub check_health: bool,
    pub record_residuals: bool,
    /// Position error beyond which a run counts as diverged, m.
    pub divergence_threshold_m: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        use crate::state::ImuPreset;
        SimConfig {
            seed: 0,
            duration_s: 60.0,
            trajectory: TrajectoryBounds::default(),
            imus: vec![
                ImuSpec::new(ImuPreset::Vn300.noise()),
                ImuSpec::new(ImuPreset::Vn100.noise())
                    .with_extrinsics(Vector3::new(0.1, -0.05, 0.03), Vector3::new(0.1, -0.2, 0.3)),
            ],
            camera: Some(CameraSpec::default()),
            mode: FilterMode::MultiUpdate,
            calibrating: true,
            sensor_noise: true,
            output_rate_hz: 10.0,
            tuning: FilterTuning::default(),
            check_health: false,
            record_residuals: true,
            divergence_threshold_m: 100.0,
        }
    }
}

/// Measurement noise left in the filter by [`SimConfig::zero_noise`],
/// relative to nominal. Exactly zero would make camera innovations singular.
pub const ZERO_NOISE_SCALE: f64 = 1e-4;

impl SimConfig {
    /// Noise-free sensors and exact initial calibration. The filter keeps a
    /// vanishing measurement noise of `ZERO_NOISE_SCALE` times nominal.
    pub fn zero_noise(mut self) -> Self {
        self.sensor_noise = false;
        self.calibrating = false;
        for imu in self.imus.iter_mut() {
            imu.init_error = ImuSigma::zero();
            imu.noise.accel_density *= ZERO_NOISE_SCALE;
            imu.noise.gyro_density *= ZERO_NOISE_SCALE;
        }
        if let Some(cam) = self.camera.as_mut() {
            cam.model.pixel_noise_std *= ZERO_NOISE_SCALE;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if self.imus.is_empty() {
            return Err(Error::NoImus);
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad("duration must be positive");
        }
        if !(self.output_rate_hz > 0.0 && self.output_rate_hz.is_finite()) {
            return bad("output rate must be positive");
        }
        self.trajectory.validate()?;
        for imu in &self.imus {
            imu.noise.validate()?;
        }
        let first = &self.imus[0];
        if first.position.norm() != 0.0 || first.orientation != Quat::identity() {
            return bad("the first IMU defines the body frame and needs identity extrinsics");
        }
        if let Some(cam) = &self.camera {
            cam.model.validate()?;
        }
        let t = &self.tuning;
        if ![t.accel, t.rate, t.ang_accel].iter().all(|v| *v >= 0.0 && v.is_finite()) {
            return bad("process noise must be non-negative");
        }
        Ok(())
    }

    pub fn true_calibration(&self) -> Vec<ImuCalibration> {
        self.imus
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let c = if i == 0 {
                    ImuCalibration::reference()
                } else {
                    ImuCalibration::new(s.position, s.orientation)
                };
                c.with_biases(s.accel_bias, s.gyro_bias)
            })
            .collect()
    }
}

/// A timestamped measurement from one sensor.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)] // IMU samples dominate the stream
pub enum Measurement {
    Imu(ImuSample),
    Camera(CameraSample),
}

impl Measurement {
    pub fn t(&self) -> f64 {
        match self {
            Measurement::Imu(z) => z.t,
            Measurement::Camera(z) => z.t,
        }
    }

    /// IMUs by index, the camera after them.
    pub fn sensor(&self, n_imus: usize) -> usize {
        match self {
            Measurement::Imu(z) => z.imu_id,
            Measurement::Camera(_) => n_imus,
        }
    }
}

/// Sample times of a sensor at `rate_hz` with a random clock phase.
fn clock(rate_hz: f64, phase: f64, duration: f64) -> impl Iterator<Item = f64> {
    let period = 1.0 / rate_hz;
    (0..)
        .map(move |k| phase * period + k as f64 * period)
        .take_while(move |t| *t <= duration)
}

/// All sensor streams of a run merged in time order; ties go to the lower
/// sensor index.
pub fn simulate_measurements(
    cfg: &SimConfig,
    traj: &TrajectoryModel,
    truth: &[ImuCalibration],
) -> Vec<Measurement> {
    let mut clocks = stream(cfg.seed, STREAM_CLOCKS);
    let mut out = Vec::new();
    for (i, (spec, calib)) in cfg.imus.iter().zip(truth).enumerate() {
        let phase: f64 = clocks.random();
        let mut rng = stream(cfg.seed, STREAM_IMU_BASE + i as u64);
        for t in clock(spec.noise.rate_hz, phase, cfg.duration_s) {
            let r = cfg.sensor_noise.then_some(&mut rng);
            out.push(Measurement::Imu(sample_imu(traj, t, i, calib, &spec.noise, r)));
        }
    }
    if let Some(cam) = &cfg.camera {
        let phase: f64 = clocks.random();
        let mut rng = stream(cfg.seed, STREAM_CAMERA);
        for t in clock(cam.model.rate_hz, phase, cfg.duration_s) {
            let r = cfg.sensor_noise.then_some(&mut rng);
            out.push(Measurement::Camera(sample_camera(traj, t, &cam.model, &cam.landmarks, r)));
        }
    }
    let n = cfg.imus.len();
    out.sort_by(|a, b| a.t().total_cmp(&b.t()).then(a.sensor(n).cmp(&b.sensor(n))));
    out
}

/// Calibration error and standard deviation of one IMU at one epoch, SI
/// units, ordered `[p, theta, b_a, b_w]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationEpoch {
    pub error: [f64; 12],
    pub sigma: [f64; 12],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Epoch {
    pub t: f64,
    pub truth: Pose,
    pub estimate: Pose,
    pub true_velocity: Vector3<f64>,
    pub est_velocity: Vector3<f64>,
    /// Covariance of `[dp, dtheta]`.
    pub pose_cov: Matrix6<f64>,
    pub calibration: Vec<CalibrationEpoch>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    pub t: f64,
    /// IMU index, or the IMU count for the camera.
    pub sensor: usize,
    pub dim: usize,
    pub norm: f64,
    /// Normalized innovation squared.
    pub nis: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_id: usize,
    pub seed: u64,
    pub mode: FilterMode,
    pub n_imus: usize,
    pub calibrating: bool,
    pub pinned: Vec<bool>,
    /// Initial error standard deviations per IMU and parameter class.
    pub init_sigma: Vec<[f64; 4]>,
    pub epochs: Vec<Epoch>,
    pub residuals: Vec<Residual>,
    /// Set when the filter diverged; the record stops there.
    pub failure: Option<String>,
}

impl RunRecord {
    pub fn diverged(&self) -> bool {
        self.failure.is_some()
    }
}

fn calibration_epoch(est: &ImuCalibration, truth: &ImuCalibration, sigma: &[f64]) -> CalibrationEpoch {
    let dth = rotvec_from_quat(&(truth.orientation.inverse() * est.orientation));
    let parts = [
        est.position - truth.position,
        dth,
        est.accel_bias - truth.accel_bias,
        est.gyro_bias - truth.gyro_bias,
    ];
    let mut error = [0.0; 12];
    for (k, v) in parts.iter().enumerate() {
        error[3 * k..3 * k + 3].copy_from_slice(v.as_slice());
    }
    let mut s = [0.0; 12];
    s.copy_from_slice(sigma);
    CalibrationEpoch { error, sigma: s }
}

fn perturbed(truth: &ImuCalibration, sigma: &ImuSigma, rng: &mut ChaCha8Rng) -> ImuCalibration {
    let mut c = truth.clone();
    // draws happen for every IMU so streams do not depend on pinning
    let dp = normal3(rng) * sigma.position;
    let dth = normal3(rng) * sigma.orientation;
    if !c.pinned {
        c.position += dp;
        c.orientation = c.orientation * quat_from_rotvec(&dth);
    }
    c.accel_bias += normal3(rng) * sigma.accel_bias;
    c.gyro_bias += normal3(rng) * sigma.gyro_bias;
    c
}

fn init_sigmas(cfg: &SimConfig) -> Vec<ImuSigma> {
    cfg.imus
        .iter()
        .map(|s| if cfg.calibrating { s.init_error.clone() } else { ImuSigma::zero() })
        .collect()
}

/// Runs one simulation. Filter failures end the run early and are reported in
/// [`RunRecord::failure`]; only invalid configurations are errors.
pub fn run_single(cfg: &SimConfig) -> Result<RunRecord> {
    run_indexed(cfg, 0)
}

fn run_indexed(cfg: &SimConfig, run_id: usize) -> Result<RunRecord> {
    cfg.validate()?;
    let traj = gen_trajectory(cfg.seed, &cfg.trajectory)?;
    let truth = cfg.true_calibration();
    let sigmas = init_sigmas(cfg);
    let mut rng = stream(cfg.seed, STREAM_INIT);
    let initial: Vec<ImuCalibration> = truth
        .iter()
        .zip(&sigmas)
        .map(|(c, s)| perturbed(c, s, &mut rng))
        .collect();
    let events = simulate_measurements(cfg, &traj, &truth);

    let mut record = RunRecord {
        run_id,
        seed: cfg.seed,
        mode: cfg.mode,
        n_imus: cfg.imus.len(),
        calibrating: cfg.calibrating,
        pinned: truth.iter().map(|c| c.pinned).collect(),
        init_sigma: sigmas
            .iter()
            .map(|s| [s.position, s.orientation, s.accel_bias, s.gyro_bias])
            .collect(),
        epochs: Vec::new(),
        residuals: Vec::new(),
        failure: None,
    };
    let mut runner: Box<dyn Runner> = match cfg.mode {
        FilterMode::MultiUpdate => Box::new(MultiRunner::new(cfg, &traj, initial, &sigmas)?),
        FilterMode::SinglePredictor => Box::new(BaselineRunner::new(cfg, &traj, &initial[0], &sigmas[0])),
    };

    let n_out = (cfg.duration_s * cfg.output_rate_hz + 1e-9).floor() as usize;
    let epoch_time = |k: usize| k as f64 / cfg.output_rate_hz;
    let mut next = 0usize;
    let result = (|| -> Result<()> {
        for z in &events {
            while next <= n_out && epoch_time(next) <= z.t() {
                record.epochs.push(runner.epoch(epoch_time(next), &traj, &truth)?);
                next += 1;
            }
            if let Some(res) = runner.process(z, cfg)? {
                if cfg.record_residuals {
                    record.residuals.push(res);
                }
            }
        }
        while next <= n_out {
            record.epochs.push(runner.epoch(epoch_time(next), &traj, &truth)?);
            next += 1;
        }
        Ok(())
    })();
    if let Err(e) = result {
        record.failure = Some(e.to_string());
    } else if let Some(e) = record.epochs.iter().find(|e| {
        (e.estimate.position - e.truth.position).norm() > cfg.divergence_threshold_m
    }) {
        record.failure = Some(format!("position error above {} m at t = {}", cfg.divergence_threshold_m, e.t));
    }
    Ok(record)
}

trait Runner {
    fn process(&mut self, z: &Measurement, cfg: &SimConfig) -> Result<Option<Residual>>;
    fn epoch(&self, t: f64, traj: &TrajectoryModel, truth: &[ImuCalibration]) -> Result<Epoch>;
}

struct MultiRunner<'a> {
    filter: MultiImuFilter,
    camera: Option<&'a CameraSpec>,
}

impl<'a> MultiRunner<'a> {
    fn new(cfg: &'a SimConfig, traj: &TrajectoryModel, initial: Vec<ImuCalibration>, sigmas: &[ImuSigma]) -> Result<Self> {
        let state = FilterState::new(traj.body_state(0.0), initial, &cfg.tuning.body_sigma, sigmas)?;
        let imus = cfg
            .imus
            .iter()
            .map(|s| ImuProcessNoise::from_random_walk(s.noise.accel_bias_rw, s.noise.gyro_bias_rw))
            .collect();
        let noise = ProcessNoise {
            accel: Matrix3::identity() * cfg.tuning.accel,
            rate: Matrix3::identity() * cfg.tuning.rate,
            ang_accel: Matrix3::identity() * cfg.tuning.ang_accel,
            imus,
        };
        let options = FilterOptions {
            calibrating: cfg.calibrating,
            gate: cfg.tuning.gate_probability.map(|p| ChiSquareGate::at_probability(p, 6)),
            check_health: cfg.check_health,
        };
        Ok(MultiRunner {
            filter: MultiImuFilter::new(state, noise, options),
            camera: cfg.camera.as_ref(),
        })
    }
}

impl Runner for MultiRunner<'_> {
    fn process(&mut self, z: &Measurement, cfg: &SimConfig) -> Result<Option<Residual>> {
        let n = cfg.imus.len();
        let (outcome, dim) = match z {
            Measurement::Imu(s) => (self.filter.process_imu(s)?, 6),
            Measurement::Camera(s) => {
                let Some(cam) = self.camera else { return Ok(None) };
                let outcome = self.filter.process_camera(s, &cam.model, &cam.landmarks)?;
                (outcome, 2 * s.observations.len())
            }
        };
        Ok(match outcome {
            UpdateOutcome::Applied => Some(Residual {
                t: z.t(),
                sensor: z.sensor(n),
                dim,
                norm: self.filter.last_innovation_norm().unwrap_or(f64::NAN),
                nis: self.filter.last_nis().unwrap_or(f64::NAN),
            }),
            _ => None,
        })
    }

    fn epoch(&self, t: f64, traj: &TrajectoryModel, truth: &[ImuCalibration]) -> Result<Epoch> {
        let x = self.filter.predicted_at(t)?;
        let sig = x.sigmas();
        let mut pose_cov = Matrix6::zeros();
        for (a, sa) in [(0, idx::POS), (3, idx::ATT)] {
            for (b, sb) in [(0, idx::POS), (3, idx::ATT)] {
                pose_cov
                    .fixed_view_mut::<3, 3>(a, b)
                    .copy_from(&x.cov.fixed_view::<3, 3>(sa, sb));
            }
        }
        let calibration = x
            .imus
            .iter()
            .zip(truth)
            .enumerate()
            .map(|(i, (est, tr))| {
                let o = imu_offset(i);
                calibration_epoch(est, tr, &sig.as_slice()[o..o + 12])
            })
            .collect();
        Ok(Epoch {
            t,
            truth: traj.pose(t),
            estimate: Pose::new(x.body.position, x.body.orientation),
            true_velocity: traj.velocity(t),
            est_velocity: x.body.velocity,
            pose_cov,
            calibration,
        })
    }
}

struct BaselineRunner<'a> {
    filter: SinglePredictor,
    camera: Option<&'a CameraSpec>,
}

impl<'a> BaselineRunner<'a> {
    fn new(cfg: &'a SimConfig, traj: &TrajectoryModel, initial: &ImuCalibration, sigma: &ImuSigma) -> Self {
        let b = traj.body_state(0.0);
        let bs = &cfg.tuning.body_sigma;
        let mut sig = SVector::<f64, BASELINE_DIM>::zeros();
        for (o, v) in [
            (0, bs.position),
            (3, bs.velocity),
            (6, bs.attitude),
            (9, sigma.accel_bias),
            (12, sigma.gyro_bias),
        ] {
            sig.fixed_rows_mut::<3>(o).fill(v);
        }
        let mut noise = cfg.imus[0].noise.clone();
        if !cfg.calibrating {
            noise.accel_bias_rw = 0.0;
            noise.gyro_bias_rw = 0.0;
        }
        let mut filter = SinglePredictor::new(
            b.position,
            b.velocity,
            b.orientation,
            initial.accel_bias,
            initial.gyro_bias,
            &sig,
            noise,
            gravity_vector(),
        );
        filter.t = 0.0;
        BaselineRunner {
            filter,
            camera: cfg.camera.as_ref(),
        }
    }
}

impl Runner for BaselineRunner<'_> {
    fn process(&mut self, z: &Measurement, cfg: &SimConfig) -> Result<Option<Residual>> {
        let n = cfg.imus.len();
        match z {
            Measurement::Imu(s) if s.imu_id == 0 => {
                self.filter.process_imu(s.t, s.accel, s.gyro)?;
                Ok(None)
            }
            Measurement::Imu(_) => Ok(None),
            Measurement::Camera(s) => {
                let Some(cam) = self.camera else { return Ok(None) };
                let nis = self.filter.process_camera(s, &cam.model, &cam.landmarks)?;
                if !self.filter.is_finite() {
                    return Err(Error::NonFinite);
                }
                if cfg.check_health {
                    let p = nalgebra::DMatrix::from_column_slice(BASELINE_DIM, BASELINE_DIM, self.filter.cov.as_slice());
                    crate::state::check_covariance(&p)?;
                }
                Ok(nis.map(|nis| Residual {
                    t: s.t,
                    sensor: n,
                    dim: 2 * s.observations.len(),
                    norm: f64::NAN,
                    nis,
                }))
            }
        }
    }

    fn epoch(&self, t: f64, traj: &TrajectoryModel, truth: &[ImuCalibration]) -> Result<Epoch> {
        let mut f = self.filter.clone();
        f.propagate_to(t)?;
        let mut sigma = [0.0; 12];
        for k in 0..6 {
            sigma[6 + k] = f.cov[(9 + k, 9 + k)].max(0.0).sqrt();
        }
        let est = ImuCalibration::reference().with_biases(f.accel_bias, f.gyro_bias);
        Ok(Epoch {
            t,
            truth: traj.pose(t),
            estimate: Pose::new(f.position, f.orientation),
            true_velocity: traj.velocity(t),
            est_velocity: f.velocity,
            pose_cov: f.pose_covariance(),
            calibration: vec![calibration_epoch(&est, &truth[0], &sigma)],
        })
    }
}

/// Runs `n_runs` simulations with seeds derived from `cfg.seed`, in parallel
/// on the current rayon pool. Records come back in run order.
pub fn run_monte_carlo(cfg: &SimConfig, n_runs: usize) -> Result<Vec<RunRecord>> {
    if n_runs == 0 {
        return Err(Error::InvalidArgument("n_runs must be at least 1".into()));
    }
    cfg.validate()?;
    (0..n_runs)
        .into_par_iter()
        .map(|k| {
            let mut c = cfg.clone();
            c.seed = run_seed(cfg.seed, k);
            run_indexed(&c, k)
        })
        .collect()
}

/// Error-state vector of a filter state relative to the truth at its time,
/// for diagnostics.
pub fn state_error(x: &FilterState, traj: &TrajectoryModel, truth: &[ImuCalibration]) -> Result<DVector<f64>> {
    let mut t = x.clone();
    t.body = traj.body_state(x.t);
    t.imus = truth.to_vec();
    crate::state::state_difference(x, &t)
}

/// Hover specific force, for tests and examples.
pub fn hover_specific_force() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, GRAVITY)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imu_update::predict_imu_measurement;
    use crate::state::{preset_noise, ImuPreset};

    fn traj() -> TrajectoryModel {
        gen_trajectory(5, &TrajectoryBounds::default()).unwrap()
    }

    #[test]
    fn stationary_trajectory() {
        let t = TrajectoryModel::stationary();
        let b = t.body_state(3.0);
        assert_eq!(b.angular_rate, Vector3::zeros());
        assert_eq!(b.angular_accel, Vector3::zeros());
        assert_eq!(b.specific_force, hover_specific_force());
        assert_eq!(b.orientation, Quat::identity());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let tr = traj();
        let h = 1e-4;
        for k in 0..100 {
            let t = 0.37 * k as f64;
            let v_fd = (tr.position(t + h) - tr.position(t - h)) / (2.0 * h);
            assert!((v_fd - tr.velocity(t)).norm() < 1e-6);
            let a_fd = (tr.velocity(t + h) - tr.velocity(t - h)) / (2.0 * h);
            assert!((a_fd - tr.acceleration(t)).norm() < 1e-6);
            // body rate from the attitude increment
            let dq = tr.orientation(t - h).inverse() * tr.orientation(t + h);
            let w_fd = rotvec_from_quat(&dq) / (2.0 * h);
            let (w, alpha) = tr.angular_motion(t);
            assert!((w_fd - w).norm() < 1e-6, "{}", (w_fd - w).norm());
            let al_fd = (tr.angular_motion(t + h).0 - tr.angular_motion(t - h).0) / (2.0 * h);
            assert!((al_fd - alpha).norm() < 1e-6);
        }
    }

    #[test]
    fn bounds_respected() {
        let b = TrajectoryBounds::default();
        for seed in 0..20 {
            let tr = gen_trajectory(seed, &b).unwrap();
            for set in tr.position.iter() {
                assert_eq!(set.len(), 3);
                assert!(set.iter().map(|s| s.amplitude).sum::<f64>() <= b.max_position_m);
                for s in set {
                    assert!((b.min_frequency_hz..=b.max_frequency_hz).contains(&s.frequency_hz));
                }
            }
            for set in tr.euler.iter() {
                assert!(set.iter().map(|s| s.amplitude).sum::<f64>() <= b.max_angle_rad);
            }
        }
        let zero = TrajectoryBounds {
            max_position_m: 0.0,
            max_angle_rad: 0.0,
            ..b
        };
        let tr = gen_trajectory(1, &zero).unwrap();
        let s = tr.body_state(2.0);
        assert_eq!(s.angular_rate, Vector3::zeros());
        assert_eq!(s.specific_force, hover_specific_force());
    }

    #[test]
    fn same_seed_same_trajectory() {
        let a = gen_trajectory(42, &TrajectoryBounds::default()).unwrap();
        let b = gen_trajectory(42, &TrajectoryBounds::default()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_trajectory(43, &TrajectoryBounds::default()).unwrap());
    }

    #[test]
    fn noise_free_sample_equals_prediction() {
        let tr = traj();
        let calib = ImuCalibration::new(Vector3::new(0.1, -0.2, 0.05), quat_from_euler_zyx(0.3, -0.1, 0.2))
            .with_biases(Vector3::new(0.01, 0.02, -0.03), Vector3::new(1e-3, 0.0, -2e-3));
        let noise = preset_noise("VN100").unwrap();
        for k in 0..50 {
            let t = 0.61 * k as f64;
            let z = sample_imu(&tr, t, 1, &calib, &noise, None);
            let mut x = FilterState::with_defaults(tr.body_state(t), vec![ImuCalibration::reference(), calib.clone()])
                .unwrap();
            x.t = t;
            let (a, w) = predict_imu_measurement(&x, 1).unwrap();
            assert!((z.accel - a).amax() < 1e-12);
            assert!((z.gyro - w).amax() < 1e-12);
        }
    }

    #[test]
    fn lever_arm_under_pure_spin() {
        let mut tr = TrajectoryModel::stationary();
        // yaw = 0.5 t^... use a fast sinusoid near its zero crossing, where
        // the yaw acceleration vanishes
        tr.euler[2] = vec![Sinusoid {
            amplitude: 1.0,
            frequency_hz: 2.0 / TAU,
            phase: 0.0,
        }];
        let calib = ImuCalibration::new(Vector3::new(0.1, 0.0, 0.0), Quat::identity());
        let z = sample_imu(&tr, 0.0, 1, &calib, &preset_noise("VN300").unwrap(), None);
        // w = 2 rad/s about z, centripetal -w^2 r along x
        assert!((z.gyro - Vector3::new(0.0, 0.0, 2.0)).norm() < 1e-12);
        assert!((z.accel - Vector3::new(-0.4, 0.0, GRAVITY)).norm() < 1e-12);
    }

    #[test]
    fn sample_variance_matches_density() {
        let tr = TrajectoryModel::stationary();
        let noise = preset_noise("DETA10").unwrap();
        let calib = ImuCalibration::reference();
        let mut rng = stream(9, 0);
        let n = 100_000;
        let mut sa = 0.0;
        let mut sg = 0.0;
        for _ in 0..n {
            let z = sample_imu(&tr, 0.0, 0, &calib, &noise, Some(&mut rng));
            sa += (z.accel.x).powi(2);
            sg += (z.gyro.y).powi(2);
        }
        let va = sa / n as f64;
        let vg = sg / n as f64;
        assert!((va / noise.accel_sigma().powi(2) - 1.0).abs() < 0.05);
        assert!((vg / noise.gyro_sigma().powi(2) - 1.0).abs() < 0.05);
    }

    #[test]
    fn streams_are_merged_in_time_order() {
        let cfg = SimConfig {
            duration_s: 2.0,
            ..SimConfig::default()
        };
        let tr = traj();
        let ev = simulate_measurements(&cfg, &tr, &cfg.true_calibration());
        assert!(ev.windows(2).all(|w| w[0].t() <= w[1].t()));
        let count = |s: usize| ev.iter().filter(|e| e.sensor(2) == s).count();
        assert!((399..=400).contains(&count(0)));
        assert!((199..=200).contains(&count(1)));
        assert!((39..=40).contains(&count(2)));
        // independent clocks
        let first = |s: usize| ev.iter().find(|e| e.sensor(2) == s).unwrap().t();
        assert_ne!(first(0), first(1));
    }

    #[test]
    fn zero_noise_run_tracks_truth() {
        let cfg = SimConfig {
            duration_s: 10.0,
            ..SimConfig::default()
        }
        .zero_noise();
        let rec = run_single(&cfg).unwrap();
        assert!(rec.failure.is_none(), "{:?}", rec.failure);
        assert_eq!(rec.epochs.len(), 101);
        let last = rec.epochs.last().unwrap();
        assert!((last.estimate.position - last.truth.position).norm() < 1e-3);
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = SimConfig {
            duration_s: 3.0,
            ..SimConfig::default()
        };
        assert_eq!(run_single(&cfg).unwrap(), run_single(&cfg).unwrap());
    }

    #[test]
    fn campaign_of_one_matches_single_run() {
        let cfg = SimConfig {
            duration_s: 2.0,
            ..SimConfig::default()
        };
        let runs = run_monte_carlo(&cfg, 1).unwrap();
        let single = run_single(&SimConfig {
            seed: run_seed(cfg.seed, 0),
            ..cfg.clone()
        })
        .unwrap();
        assert_eq!(runs[0], single);
        assert!(run_monte_carlo(&cfg, 0).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = SimConfig::default();
        cfg.imus[0].position.x = 0.1;
        assert!(cfg.validate().is_err());
        let cfg = SimConfig {
            imus: vec![],
            ..SimConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::NoImus)));
        let cfg = SimConfig {
            duration_s: -1.0,
            ..SimConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert_eq!("single_predictor".parse::<FilterMode>().unwrap(), FilterMode::SinglePredictor);
        assert_eq!(FilterMode::MultiUpdate.to_string(), "multi_update");
        let _ = ImuPreset::Vn300;
    }
}
