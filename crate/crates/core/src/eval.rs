//! Error metrics and convergence statistics.
//!
//! Errors are always `estimate [-] truth`: vector differences, and for
//! rotations the vector `log(q_true^-1 q_est)`.

use nalgebra::{DMatrix, DVector, Matrix6, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::sim::{CalibrationEpoch, RunRecord};
use crate::so3::{rotvec_from_quat, Quat};

/// Final-error statistics average over this trailing fraction of a run.
pub const FINAL_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: Quat,
}

impl Pose {
    pub fn new(position: Vector3<f64>, orientation: Quat) -> Self {
        Pose { position, orientation }
    }
}

/// `[dp, dtheta]` of `est` relative to `truth`.
pub fn pose_error(truth: &Pose, est: &Pose) -> Vector6<f64> {
    let dp = est.position - truth.position;
    let dth = rotvec_from_quat(&(truth.orientation.inverse() * est.orientation));
    Vector6::new(dp.x, dp.y, dp.z, dth.x, dth.y, dth.z)
}

/// Root-mean-square position error.
pub fn rmse(truth: &[Vector3<f64>], est: &[Vector3<f64>]) -> Result<f64> {
    if truth.len() != est.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: est.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("empty series".into()));
    }
    let sum: f64 = truth.iter().zip(est).map(|(a, b)| (b - a).norm_squared()).sum();
    Ok((sum / truth.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpeSummary {
    pub window_s: f64,
    pub pairs: usize,
    /// Translation RMS over all windows.
    pub rms: f64,
    pub mean: f64,
    pub max: f64,
}

/// Relative pose error over windows of `window_s`.
///
/// For each start epoch `i` the end epoch `j` is the first with
/// `t_j - t_i >= window_s`. The error of the window is the translation part of
/// `(T_i^-1 T_j)_true^-1 (T_i^-1 T_j)_est`.
pub fn rpe(times: &[f64], truth: &[Pose], est: &[Pose], window_s: f64) -> Result<RpeSummary> {
    if truth.len() != est.len() || times.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: times.len(),
            got: if truth.len() != times.len() { truth.len() } else { est.len() },
        });
    }
    if !(window_s > 0.0) {
        return Err(Error::InvalidArgument(format!("window {window_s} s")));
    }
    let span = match (times.first(), times.last()) {
        (Some(a), Some(b)) => b - a,
        _ => 0.0,
    };
    if window_s > span {
        return Err(Error::InvalidArgument(format!(
            "window {window_s} s longer than the {span} s series"
        )));
    }
    let mut errors = Vec::new();
    let mut j = 0;
    for i in 0..times.len() {
        j = j.max(i + 1);
        // tolerate rounding in uniform timestamps
        while j < times.len() && times[j] - times[i] < window_s - 1e-9 {
            j += 1;
        }
        if j >= times.len() {
            break;
        }
        errors.push(window_error(&truth[i], &truth[j], &est[i], &est[j]));
    }
    let n = errors.len();
    let rms = (errors.iter().map(|e| e * e).sum::<f64>() / n as f64).sqrt();
    Ok(RpeSummary {
        window_s,
        pairs: n,
        rms,
        mean: errors.iter().sum::<f64>() / n as f64,
        max: errors.iter().copied().fold(0.0, f64::max),
    })
}

fn window_error(ti: &Pose, tj: &Pose, ei: &Pose, ej: &Pose) -> f64 {
    let rel = |a: &Pose, b: &Pose| a.orientation.to_rot().transpose() * (b.position - a.position);
    let rot_true = ti.orientation.inverse() * tj.orientation;
    // translation of rel_true^-1 rel_est
    (rot_true.to_rot().transpose() * (rel(ei, ej) - rel(ti, tj))).norm()
}

/// `e^T P^-1 e`.
pub fn nees_from_error(e: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    if cov.nrows() != e.len() || cov.ncols() != e.len() {
        return Err(Error::DimensionMismatch {
            expected: e.len(),
            got: cov.nrows(),
        });
    }
    let chol = cov.clone().cholesky().ok_or(Error::SingularCovariance)?;
    Ok(e.dot(&chol.solve(e)))
}

/// Body NEES over position and attitude.
pub fn nees(truth: &Pose, est: &Pose, pose_cov: &Matrix6<f64>) -> Result<f64> {
    let chol = pose_cov.cholesky().ok_or(Error::SingularCovariance)?;
    let e = pose_error(truth, est);
    Ok(e.dot(&chol.solve(&e)))
}

/// Calibration parameter classes, in error-state order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamClass {
    Position,
    Orientation,
    AccelBias,
    GyroBias,
}

impl ParamClass {
    pub const ALL: [ParamClass; 4] = [
        ParamClass::Position,
        ParamClass::Orientation,
        ParamClass::AccelBias,
        ParamClass::GyroBias,
    ];

    pub fn offset(self) -> usize {
        match self {
            ParamClass::Position => 0,
            ParamClass::Orientation => 3,
            ParamClass::AccelBias => 6,
            ParamClass::GyroBias => 9,
        }
    }

    /// SI to reporting units (mm, mrad, mm/s^2, mrad/s).
    pub fn report_scale(self) -> f64 {
        1e3
    }

    pub fn unit(self) -> &'static str {
        match self {
            ParamClass::Position => "mm",
            ParamClass::Orientation => "mrad",
            ParamClass::AccelBias => "mm/s^2",
            ParamClass::GyroBias => "mrad/s",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamClass::Position => "position",
            ParamClass::Orientation => "orientation",
            ParamClass::AccelBias => "accel_bias",
            ParamClass::GyroBias => "gyro_bias",
        }
    }

    /// Extrinsics of the pinned reference IMU carry no estimate.
    pub fn is_extrinsic(self) -> bool {
        matches!(self, ParamClass::Position | ParamClass::Orientation)
    }
}

/// Per-run metrics; calibration errors in reporting units.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub rmse_position: f64,
    pub rpe_1s: f64,
    pub rpe_5s: f64,
    pub nees: Vec<f64>,
    pub nees_mean: f64,
    /// RMS over the components of every estimated IMU, averaged over the
    /// final fraction of the run, indexed by [`ParamClass`] order.
    pub final_calibration: [f64; 4],
    /// Fraction of (epoch, component) pairs inside the 3-sigma envelope.
    pub sigma3_coverage: f64,
}

/// Indices of the final `FINAL_FRACTION` of `n` epochs (at least one).
pub fn final_window(n: usize) -> std::ops::Range<usize> {
    let k = ((n as f64 * FINAL_FRACTION).ceil() as usize).clamp(1, n.max(1));
    n.saturating_sub(k)..n
}

/// Calibration error of IMU `imu` averaged over the final window.
pub fn final_calibration_error(record: &RunRecord, imu: usize) -> Option<[f64; 12]> {
    let range = final_window(record.epochs.len());
    if range.is_empty() {
        return None;
    }
    let mut acc = [0.0; 12];
    let n = range.len() as f64;
    for e in &record.epochs[range] {
        let c = e.calibration.get(imu)?;
        for (a, v) in acc.iter_mut().zip(c.error.iter()) {
            *a += v / n;
        }
    }
    Some(acc)
}

fn class_applies(record: &RunRecord, imu: usize, class: ParamClass) -> bool {
    !(class.is_extrinsic() && record.pinned.get(imu).copied().unwrap_or(false))
}

pub fn summarize_run(record: &RunRecord) -> Result<MetricSummary> {
    if record.epochs.is_empty() {
        return Err(Error::InvalidArgument("run has no epochs".into()));
    }
    let times: Vec<f64> = record.epochs.iter().map(|e| e.t).collect();
    let truth: Vec<Pose> = record.epochs.iter().map(|e| e.truth).collect();
    let est: Vec<Pose> = record.epochs.iter().map(|e| e.estimate).collect();
    let tp: Vec<_> = truth.iter().map(|p| p.position).collect();
    let ep: Vec<_> = est.iter().map(|p| p.position).collect();
    let rmse_position = rmse(&tp, &ep)?;
    let window = |w: f64| rpe(&times, &truth, &est, w).map(|s| s.rms).unwrap_or(f64::NAN);
    let nees: Vec<f64> = record
        .epochs
        .iter()
        .map(|e| nees(&e.truth, &e.estimate, &e.pose_cov).unwrap_or(f64::NAN))
        .collect();
    let finite: Vec<f64> = nees.iter().copied().filter(|v| v.is_finite()).collect();
    let nees_mean = if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };

    let mut final_calibration = [0.0; 4];
    for (k, class) in ParamClass::ALL.iter().enumerate() {
        let mut sum = 0.0;
        let mut count = 0usize;
        for imu in 0..record.n_imus {
            if !class_applies(record, imu, *class) {
                continue;
            }
            if let Some(err) = final_calibration_error(record, imu) {
                for v in &err[class.offset()..class.offset() + 3] {
                    sum += v * v;
                    count += 1;
                }
            }
        }
        final_calibration[k] = if count == 0 {
            0.0
        } else {
            (sum / count as f64).sqrt() * class.report_scale()
        };
    }

    Ok(MetricSummary {
        rmse_position,
        rpe_1s: window(1.0),
        rpe_5s: window(5.0),
        nees,
        nees_mean,
        final_calibration,
        sigma3_coverage: coverage(record),
    })
}

fn inside(c: &CalibrationEpoch, k: usize) -> bool {
    c.error[k].abs() <= 3.0 * c.sigma[k]
}

/// Fraction of (epoch, component) pairs within 3 sigma over every estimated
/// calibration component of the run.
pub fn coverage(record: &RunRecord) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for e in &record.epochs {
        for (imu, c) in e.calibration.iter().enumerate() {
            for class in ParamClass::ALL {
                if !class_applies(record, imu, class) {
                    continue;
                }
                for k in class.offset()..class.offset() + 3 {
                    total += 1;
                    hit += inside(c, k) as usize;
                }
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStatistics {
    pub class: ParamClass,
    /// Signed component errors, reporting units.
    pub mean: f64,
    pub std: f64,
    pub median_abs: f64,
    /// Standard deviation of the initial estimate error, reporting units.
    pub init_std: f64,
    /// Worst per-component fraction of runs inside 3 sigma at the final epoch.
    pub final_coverage: f64,
    pub samples: usize,
}

impl ClassStatistics {
    /// `init_std / std`; infinite when the final spread is zero.
    pub fn reduction(&self) -> f64 {
        if self.std == 0.0 {
            f64::INFINITY
        } else {
            self.init_std / self.std
        }
    }
}

/// Campaign-level calibration statistics per parameter class over
/// non-diverged runs.
pub fn calibration_convergence(records: &[RunRecord]) -> Vec<ClassStatistics> {
    let ok: Vec<&RunRecord> = records
        .iter()
        .filter(|r| r.failure.is_none() && !r.epochs.is_empty())
        .collect();
    ParamClass::ALL
        .iter()
        .map(|&class| {
            let scale = class.report_scale();
            let mut values = Vec::new();
            let mut init = Vec::new();
            // per component: (inside, total) at the final epoch
            let mut cover = [(0usize, 0usize); 3];
            for r in &ok {
                let last = r.epochs.last().expect("non-empty");
                for imu in 0..r.n_imus {
                    if !class_applies(r, imu, class) {
                        continue;
                    }
                    if let Some(err) = final_calibration_error(r, imu) {
                        values.extend(err[class.offset()..class.offset() + 3].iter().map(|v| v * scale));
                    }
                    if let Some(sigma) = r.init_sigma.get(imu) {
                        init.push(sigma[class.offset() / 3] * scale);
                    }
                    if let Some(c) = last.calibration.get(imu) {
                        for (axis, slot) in cover.iter_mut().enumerate() {
                            slot.1 += 1;
                            slot.0 += inside(c, class.offset() + axis) as usize;
                        }
                    }
                }
            }
            let n = values.len();
            let mean = if n == 0 { 0.0 } else { values.iter().sum::<f64>() / n as f64 };
            let std = if n < 2 {
                0.0
            } else {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            };
            let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
            abs.sort_by(f64::total_cmp);
            let init_std = if init.is_empty() {
                0.0
            } else {
                init.iter().sum::<f64>() / init.len() as f64
            };
            let final_coverage = cover
                .iter()
                .map(|(h, t)| if *t == 0 { 1.0 } else { *h as f64 / *t as f64 })
                .fold(1.0, f64::min);
            ClassStatistics {
                class,
                mean,
                std,
                median_abs: median_sorted(&abs),
                init_std,
                final_coverage,
                samples: n,
            }
        })
        .collect()
}

/// Median of an ascending slice; zero when empty.
pub fn median_sorted(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    v.sort_by(f64::total_cmp);
    median_sorted(&v)
}
