//! Config files, commands and CSV output.
//!
//! Exit codes: 0 on success, 1 on configuration or I/O errors, 2 when a
//! campaign exceeds its divergence budget.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraModel, LandmarkSet};
use crate::error::{Error, Result};
use crate::eval::{calibration_convergence, median, pose_error, summarize_run, ClassStatistics, ParamClass};
use crate::observability::{analyze, generic_state, ObservabilityAnalysis};
use crate::sim::{run_monte_carlo, run_single, CameraSpec, ImuSpec, RunRecord, SimConfig, TrajectoryBounds};
use crate::so3::quat_from_rotvec;
use crate::state::{ImuPreset, ImuSigma, NoiseParams};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;

/// Environment variable capping the number of parallel runs.
pub const THREADS_ENV: &str = "MIMU_THREADS";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    seed: Option<u64>,
    duration_s: Option<f64>,
    runs: Option<usize>,
    mode: Option<String>,
    calibrating: Option<bool>,
    sensor_noise: Option<bool>,
    output_rate_hz: Option<f64>,
    divergence_budget: Option<usize>,
    trajectory: Option<TrajectoryFile>,
    imus: Option<Vec<ImuFile>>,
    camera: Option<CameraFile>,
    filter: Option<FilterFile>,
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryFile {
    max_position_m: Option<f64>,
    max_angle_rad: Option<f64>,
    min_frequency_hz: Option<f64>,
    max_frequency_hz: Option<f64>,
    terms: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImuFile {
    preset: Option<String>,
    densities: Option<DensitiesFile>,
    rate_hz: Option<f64>,
    extrinsic: Option<ExtrinsicFile>,
    bias: Option<BiasFile>,
    init_error_std: Option<InitErrorFile>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct DensitiesFile {
    /// m/s^2/sqrt(Hz)
    accel: f64,
    /// rad/s/sqrt(Hz)
    gyro: f64,
    accel_bias_rw: f64,
    gyro_bias_rw: f64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExtrinsicFile {
    pos_m: Option<[f64; 3]>,
    rotvec_rad: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct BiasFile {
    accel: Option<[f64; 3]>,
    gyro: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct InitErrorFile {
    pos_m: Option<f64>,
    ang_rad: Option<f64>,
    ba: Option<f64>,
    bw: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraFile {
    enabled: Option<bool>,
    rate_hz: Option<f64>,
    focal_px: Option<f64>,
    resolution: Option<[u32; 2]>,
    pixel_noise_std: Option<f64>,
    landmarks: Option<LandmarksFile>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct LandmarksFile {
    nx: Option<usize>,
    ny: Option<usize>,
    spacing_m: Option<f64>,
    offset_m: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilterFile {
    accel_q: Option<f64>,
    rate_q: Option<f64>,
    ang_accel_q: Option<f64>,
    gate_probability: Option<f64>,
    check_health: Option<bool>,
}

/// A validated config file: the simulation plus campaign settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Campaign {
    pub sim: SimConfig,
    pub runs: usize,
    pub output_dir: PathBuf,
    /// Largest number of diverged runs that still counts as success.
    pub divergence_budget: usize,
}

impl Default for Campaign {
    fn default() -> Self {
        Campaign {
            sim: SimConfig::default(),
            runs: 100,
            output_dir: PathBuf::from("out"),
            divergence_budget: 0,
        }
    }
}

fn config_err(path: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        reason: reason.into(),
    }
}

fn positive(path: &str, v: Option<f64>, default: f64) -> Result<f64> {
    match v {
        None => Ok(default),
        Some(x) if x > 0.0 && x.is_finite() => Ok(x),
        Some(x) => Err(config_err(path, format!("must be positive and finite, got {x}"))),
    }
}

fn non_negative(path: &str, v: Option<f64>, default: f64) -> Result<f64> {
    match v {
        None => Ok(default),
        Some(x) if x >= 0.0 && x.is_finite() => Ok(x),
        Some(x) => Err(config_err(path, format!("must be non-negative and finite, got {x}"))),
    }
}

fn vec3(path: &str, v: Option<[f64; 3]>) -> Result<Vector3<f64>> {
    let v = Vector3::from(v.unwrap_or([0.0; 3]));
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(config_err(path, "must be finite"))
    }
}

/// Parses and validates a YAML config string.
pub fn parse_config_str(text: &str) -> Result<Campaign> {
    let de = serde_yaml::Deserializer::from_str(text);
    let file: ConfigFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        config_err(if path == "." { String::from("<root>") } else { path }, e.into_inner().to_string())
    })?;
    build_campaign(file)
}

/// Reads, parses and validates a YAML config file.
pub fn parse_config(path: &Path) -> Result<Campaign> {
    let text = fs::read_to_string(path).map_err(|e| config_err(path.display().to_string(), e.to_string()))?;
    parse_config_str(&text)
}

fn build_campaign(f: ConfigFile) -> Result<Campaign> {
    let defaults = SimConfig::default();
    let mut sim = SimConfig {
        seed: f.seed.unwrap_or(0),
        duration_s: positive("duration_s", f.duration_s, defaults.duration_s)?,
        output_rate_hz: positive("output_rate_hz", f.output_rate_hz, defaults.output_rate_hz)?,
        calibrating: f.calibrating.unwrap_or(defaults.calibrating),
        sensor_noise: f.sensor_noise.unwrap_or(true),
        ..defaults.clone()
    };
    if let Some(mode) = &f.mode {
        sim.mode = mode.parse().map_err(|_| {
            config_err("mode", format!("expected multi_update or single_predictor, got {mode:?}"))
        })?;
    }
    let runs = f.runs.unwrap_or(100);
    if runs == 0 {
        return Err(config_err("runs", "must be at least 1"));
    }

    let t = f.trajectory.unwrap_or_default();
    let tb = TrajectoryBounds::default();
    sim.trajectory = TrajectoryBounds {
        max_position_m: non_negative("trajectory.max_position_m", t.max_position_m, tb.max_position_m)?,
        max_angle_rad: non_negative("trajectory.max_angle_rad", t.max_angle_rad, tb.max_angle_rad)?,
        min_frequency_hz: positive("trajectory.min_frequency_hz", t.min_frequency_hz, tb.min_frequency_hz)?,
        max_frequency_hz: positive("trajectory.max_frequency_hz", t.max_frequency_hz, tb.max_frequency_hz)?,
        terms: t.terms.unwrap_or(tb.terms),
    };
    if sim.trajectory.terms == 0 {
        return Err(config_err("trajectory.terms", "must be at least 1"));
    }
    if sim.trajectory.max_frequency_hz < sim.trajectory.min_frequency_hz {
        return Err(config_err("trajectory.max_frequency_hz", "must not be below min_frequency_hz"));
    }

    if let Some(imus) = f.imus {
        if imus.is_empty() {
            return Err(config_err("imus", "at least one IMU is required"));
        }
        sim.imus = imus
            .into_iter()
            .enumerate()
            .map(|(i, imu)| build_imu(i, imu))
            .collect::<Result<_>>()?;
    }

    let cam = f.camera.unwrap_or_default();
    sim.camera = if cam.enabled.unwrap_or(true) {
        Some(build_camera(cam)?)
    } else {
        None
    };

    let filter = f.filter.unwrap_or_default();
    let tuning = &mut sim.tuning;
    tuning.accel = non_negative("filter.accel_q", filter.accel_q, tuning.accel)?;
    tuning.rate = non_negative("filter.rate_q", filter.rate_q, tuning.rate)?;
    tuning.ang_accel = non_negative("filter.ang_accel_q", filter.ang_accel_q, tuning.ang_accel)?;
    if let Some(p) = filter.gate_probability {
        if !(p > 0.0 && p < 1.0) {
            return Err(config_err("filter.gate_probability", format!("must lie in (0, 1), got {p}")));
        }
        tuning.gate_probability = Some(p);
    }
    sim.check_health = filter.check_health.unwrap_or(false);

    sim.validate().map_err(|e| config_err("<root>", e.to_string()))?;
    Ok(Campaign {
        sim,
        runs,
        output_dir: f.output_dir.unwrap_or_else(|| PathBuf::from("out")),
        divergence_budget: f.divergence_budget.unwrap_or(0),
    })
}

fn build_imu(i: usize, f: ImuFile) -> Result<ImuSpec> {
    let at = |key: &str| format!("imus[{i}].{key}");
    let mut noise: NoiseParams = match (&f.preset, &f.densities) {
        (Some(_), Some(_)) => return Err(config_err(at("densities"), "give either preset or densities, not both")),
        (None, None) => return Err(config_err(format!("imus[{i}]"), "needs a preset or densities")),
        (Some(p), None) => p
            .parse::<ImuPreset>()
            .map_err(|e| config_err(at("preset"), e.to_string()))?
            .noise(),
        (None, Some(d)) => NoiseParams {
            accel_density: positive(&at("densities.accel"), Some(d.accel), 0.0)?,
            gyro_density: positive(&at("densities.gyro"), Some(d.gyro), 0.0)?,
            accel_bias_rw: positive(&at("densities.accel_bias_rw"), Some(d.accel_bias_rw), 0.0)?,
            gyro_bias_rw: positive(&at("densities.gyro_bias_rw"), Some(d.gyro_bias_rw), 0.0)?,
            rate_hz: 100.0,
        },
    };
    noise.rate_hz = positive(&at("rate_hz"), f.rate_hz, noise.rate_hz)?;
    noise.validate().map_err(|e| config_err(format!("imus[{i}]"), e.to_string()))?;

    let ext = f.extrinsic.unwrap_or_default();
    let pos = vec3(&at("extrinsic.pos_m"), ext.pos_m)?;
    let rot = vec3(&at("extrinsic.rotvec_rad"), ext.rotvec_rad)?;
    if i == 0 && (pos.norm() != 0.0 || rot.norm() != 0.0) {
        return Err(config_err(at("extrinsic"), "the first IMU defines the body frame and must be the identity"));
    }
    let bias = f.bias.unwrap_or_default();
    let d = ImuSigma::default();
    let e = f.init_error_std.unwrap_or_default();
    Ok(ImuSpec {
        noise,
        position: pos,
        orientation: quat_from_rotvec(&rot),
        accel_bias: vec3(&at("bias.accel"), bias.accel)?,
        gyro_bias: vec3(&at("bias.gyro"), bias.gyro)?,
        init_error: ImuSigma {
            position: non_negative(&at("init_error_std.pos_m"), e.pos_m, d.position)?,
            orientation: non_negative(&at("init_error_std.ang_rad"), e.ang_rad, d.orientation)?,
            accel_bias: non_negative(&at("init_error_std.ba"), e.ba, d.accel_bias)?,
            gyro_bias: non_negative(&at("init_error_std.bw"), e.bw, d.gyro_bias)?,
        },
    })
}

fn build_camera(f: CameraFile) -> Result<CameraSpec> {
    let d = CameraModel::default();
    let mut model = match f.resolution {
        Some([w, h]) if w > 0 && h > 0 => d.clone().with_resolution(w, h),
        Some(_) => return Err(config_err("camera.resolution", "width and height must be positive")),
        None => d.clone(),
    };
    model.rate_hz = positive("camera.rate_hz", f.rate_hz, d.rate_hz)?;
    model.focal_px = positive("camera.focal_px", f.focal_px, d.focal_px)?;
    model.pixel_noise_std = positive("camera.pixel_noise_std", f.pixel_noise_std, d.pixel_noise_std)?;
    let l = f.landmarks.unwrap_or_default();
    let nx = l.nx.unwrap_or(10);
    let ny = l.ny.unwrap_or(10);
    if nx == 0 || ny == 0 {
        return Err(config_err("camera.landmarks", "nx and ny must be positive"));
    }
    let spacing = positive("camera.landmarks.spacing_m", l.spacing_m, 0.5)?;
    let offset = positive("camera.landmarks.offset_m", l.offset_m, 5.0)?;
    let landmarks = LandmarkSet::grid(nx, ny, spacing, offset).map_err(|e| config_err("camera.landmarks", e.to_string()))?;
    Ok(CameraSpec { model, landmarks })
}

/// `%.9g`: nine significant digits, trailing zeros trimmed.
pub fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp) as usize;
        trim_zeros(&format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

fn csv_line(out: &mut String, fields: impl IntoIterator<Item = String>) {
    let mut first = true;
    for f in fields {
        if !first {
            out.push(',');
        }
        out.push_str(&f);
        first = false;
    }
    out.push('\n');
}

const AXES: [&str; 3] = ["x", "y", "z"];

/// Per-epoch pose truth, estimate, error and 3-sigma bounds.
pub fn states_csv(record: &RunRecord) -> String {
    let mut out = String::new();
    let mut header = vec!["t".to_string()];
    for prefix in ["true", "est"] {
        header.extend(AXES.iter().map(|a| format!("{prefix}_p_{a}")));
        header.extend(["w", "x", "y", "z"].iter().map(|a| format!("{prefix}_q_{a}")));
        header.extend(AXES.iter().map(|a| format!("{prefix}_v_{a}")));
    }
    header.extend(AXES.iter().map(|a| format!("err_p_{a}")));
    header.extend(AXES.iter().map(|a| format!("err_th_{a}")));
    header.extend(AXES.iter().map(|a| format!("sigma3_p_{a}")));
    header.extend(AXES.iter().map(|a| format!("sigma3_th_{a}")));
    header.push("nees".into());
    csv_line(&mut out, header);
    for e in &record.epochs {
        let mut row = vec![fmt_float(e.t)];
        for (pose, v) in [(&e.truth, &e.true_velocity), (&e.estimate, &e.est_velocity)] {
            row.extend(pose.position.iter().map(|x| fmt_float(*x)));
            let q = &pose.orientation;
            row.extend([q.w, q.x, q.y, q.z].iter().map(|x| fmt_float(*x)));
            row.extend(v.iter().map(|x| fmt_float(*x)));
        }
        let err = pose_error(&e.truth, &e.estimate);
        row.extend(err.iter().map(|x| fmt_float(*x)));
        row.extend((0..6).map(|k| fmt_float(3.0 * e.pose_cov[(k, k)].max(0.0).sqrt())));
        row.push(fmt_float(crate::eval::nees(&e.truth, &e.estimate, &e.pose_cov).unwrap_or(f64::NAN)));
        csv_line(&mut out, row);
    }
    out
}

fn estimated(record: &RunRecord, imu: usize, class: ParamClass) -> bool {
    !(class.is_extrinsic() && record.pinned.get(imu).copied().unwrap_or(false))
}

/// Calibration error and 3-sigma bound per epoch, long format, SI units.
pub fn calibration_csv(record: &RunRecord) -> String {
    let mut out = String::from("t,imu,parameter,axis,error,sigma3\n");
    for e in &record.epochs {
        for (imu, c) in e.calibration.iter().enumerate() {
            for class in ParamClass::ALL {
                if !estimated(record, imu, class) {
                    continue;
                }
                for (k, axis) in AXES.iter().enumerate() {
                    let j = class.offset() + k;
                    csv_line(
                        &mut out,
                        [
                            fmt_float(e.t),
                            imu.to_string(),
                            class.name().to_string(),
                            axis.to_string(),
                            fmt_float(c.error[j]),
                            fmt_float(3.0 * c.sigma[j]),
                        ],
                    );
                }
            }
        }
    }
    out
}

pub fn residuals_csv(record: &RunRecord) -> String {
    let mut out = String::from("t,sensor,dim,norm,nis\n");
    for r in &record.residuals {
        csv_line(
            &mut out,
            [fmt_float(r.t), r.sensor.to_string(), r.dim.to_string(), fmt_float(r.norm), fmt_float(r.nis)],
        );
    }
    out
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run_id: usize,
    pub mode: String,
    pub n_imus: usize,
    pub rmse_pos_m: f64,
    pub rpe_1s_m: f64,
    pub rpe_5s_m: f64,
    pub nees_mean: f64,
    pub cal_pos_err_mm: f64,
    pub cal_ori_err_mrad: f64,
    pub cal_ba_err_mm_s2: f64,
    pub cal_bw_err_mrad_s: f64,
    pub sigma3_coverage: f64,
    pub diverged: u8,
}

pub const SUMMARY_HEADER: &str = "run_id,mode,n_imus,rmse_pos_m,rpe_1s_m,rpe_5s_m,nees_mean,cal_pos_err_mm,cal_ori_err_mrad,cal_ba_err_mm_s2,cal_bw_err_mrad_s,sigma3_coverage,diverged";

pub fn summary_row(record: &RunRecord) -> SummaryRow {
    let m = summarize_run(record).ok();
    let get = |f: &dyn Fn(&crate::eval::MetricSummary) -> f64| m.as_ref().map(f).unwrap_or(f64::NAN);
    SummaryRow {
        run_id: record.run_id,
        mode: record.mode.to_string(),
        n_imus: record.n_imus,
        rmse_pos_m: get(&|s| s.rmse_position),
        rpe_1s_m: get(&|s| s.rpe_1s),
        rpe_5s_m: get(&|s| s.rpe_5s),
        nees_mean: get(&|s| s.nees_mean),
        cal_pos_err_mm: get(&|s| s.final_calibration[0]),
        cal_ori_err_mrad: get(&|s| s.final_calibration[1]),
        cal_ba_err_mm_s2: get(&|s| s.final_calibration[2]),
        cal_bw_err_mrad_s: get(&|s| s.final_calibration[3]),
        sigma3_coverage: get(&|s| s.sigma3_coverage),
        diverged: record.diverged() as u8,
    }
}

pub fn summary_csv(records: &[RunRecord]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in records {
        let s = summary_row(r);
        csv_line(
            &mut out,
            [
                s.run_id.to_string(),
                s.mode,
                s.n_imus.to_string(),
                fmt_float(s.rmse_pos_m),
                fmt_float(s.rpe_1s_m),
                fmt_float(s.rpe_5s_m),
                fmt_float(s.nees_mean),
                fmt_float(s.cal_pos_err_mm),
                fmt_float(s.cal_ori_err_mrad),
                fmt_float(s.cal_ba_err_mm_s2),
                fmt_float(s.cal_bw_err_mrad_s),
                fmt_float(s.sigma3_coverage),
                s.diverged.to_string(),
            ],
        );
    }
    out
}

/// Per-epoch campaign statistics over non-diverged runs: mean and RMS error
/// and mean 3-sigma bound of every estimated calibration component.
pub fn convergence_csv(records: &[RunRecord]) -> String {
    let mut out = String::from("t,imu,parameter,axis,mean_error,rms_error,mean_sigma3\n");
    let ok: Vec<&RunRecord> = records.iter().filter(|r| !r.diverged()).collect();
    let Some(first) = ok.first() else { return out };
    let n_epochs = ok.iter().map(|r| r.epochs.len()).min().unwrap_or(0);
    let n = ok.len() as f64;
    for k in 0..n_epochs {
        let t = first.epochs[k].t;
        for imu in 0..first.epochs[k].calibration.len() {
            for class in ParamClass::ALL {
                if !estimated(first, imu, class) {
                    continue;
                }
                for (a, axis) in AXES.iter().enumerate() {
                    let j = class.offset() + a;
                    let (mut sum, mut sq, mut sig) = (0.0, 0.0, 0.0);
                    for r in &ok {
                        let c = &r.epochs[k].calibration[imu];
                        sum += c.error[j];
                        sq += c.error[j] * c.error[j];
                        sig += 3.0 * c.sigma[j];
                    }
                    csv_line(
                        &mut out,
                        [
                            fmt_float(t),
                            imu.to_string(),
                            class.name().to_string(),
                            axis.to_string(),
                            fmt_float(sum / n),
                            fmt_float((sq / n).sqrt()),
                            fmt_float(sig / n),
                        ],
                    );
                }
            }
        }
    }
    out
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

/// Writes `states.csv`, `calibration.csv` and `residuals.csv` of a run under
/// `root/run_<id>/`.
pub fn write_run(root: &Path, record: &RunRecord) -> Result<PathBuf> {
    let dir = root.join(format!("run_{}", record.run_id));
    write(&dir.join("states.csv"), &states_csv(record))?;
    write(&dir.join("calibration.csv"), &calibration_csv(record))?;
    write(&dir.join("residuals.csv"), &residuals_csv(record))?;
    Ok(dir)
}

/// Table of per-class calibration statistics in reporting units.
pub fn convergence_table(stats: &[ClassStatistics]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>7} {:>10} {:>10} {:>12} {:>10} {:>10} {:>9}",
        "parameter", "unit", "mean", "std", "median|e|", "init std", "reduction", "cover3s"
    );
    for s in stats {
        let _ = writeln!(
            out,
            "{:<12} {:>7} {:>10.3} {:>10.3} {:>12.3} {:>10.3} {:>10.1} {:>9.2}",
            s.class.name(),
            s.class.unit(),
            s.mean,
            s.std,
            s.median_abs,
            s.init_std,
            s.reduction(),
            s.final_coverage
        );
    }
    out
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() < 2 {
        0.0
    } else {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

/// Aligned-text report of a summary CSV, one table per (mode, IMU count).
pub fn render_report(rows: &[SummaryRow]) -> String {
    let mut groups: Vec<(String, usize)> = rows.iter().map(|r| (r.mode.clone(), r.n_imus)).collect();
    groups.sort();
    groups.dedup();
    let mut out = String::new();
    for (mode, n) in groups {
        let all: Vec<&SummaryRow> = rows.iter().filter(|r| r.mode == mode && r.n_imus == n).collect();
        let ok: Vec<&SummaryRow> = all.iter().copied().filter(|r| r.diverged == 0).collect();
        let _ = writeln!(
            out,
            "{mode}, {n} IMU(s): {} runs, {} diverged",
            all.len(),
            all.len() - ok.len()
        );
        let _ = writeln!(out, "{:<22} {:>8} {:>12} {:>12} {:>12}", "Parameter", "Unit", "Mean", "Std", "Median");
        let col = |f: fn(&SummaryRow) -> f64| -> Vec<f64> { ok.iter().map(|r| f(r)).collect() };
        let lines: [(&str, &str, Vec<f64>); 9] = [
            ("Position", "mm", col(|r| r.cal_pos_err_mm)),
            ("Orientation", "mrad", col(|r| r.cal_ori_err_mrad)),
            ("Accelerometer Bias", "mm/s^2", col(|r| r.cal_ba_err_mm_s2)),
            ("Gyroscope Bias", "mrad/s", col(|r| r.cal_bw_err_mrad_s)),
            ("Position RMSE", "mm", col(|r| r.rmse_pos_m * 1e3)),
            ("RPE 1 s", "mm", col(|r| r.rpe_1s_m * 1e3)),
            ("RPE 5 s", "mm", col(|r| r.rpe_5s_m * 1e3)),
            ("Body NEES", "-", col(|r| r.nees_mean)),
            ("3-sigma coverage", "-", col(|r| r.sigma3_coverage)),
        ];
        for (name, unit, v) in lines {
            let (m, s) = mean_std(&v);
            let _ = writeln!(out, "{name:<22} {unit:>8} {m:>12.3} {s:>12.3} {:>12.3}", median(&v));
        }
        out.push('\n');
    }
    out
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let rows = reader.deserialize().collect::<std::result::Result<Vec<SummaryRow>, _>>()?;
    Ok(rows)
}

/// Text report of an observability analysis.
pub fn render_observability(a: &ObservabilityAnalysis, n_imus: usize, camera: bool) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "IMUs: {n_imus}  camera: {}", if camera { "yes" } else { "no" });
    let _ = writeln!(out, "{:<14} {:>10} {:>6} {:>11} {:>10}", "", "state dim", "rank", "deficiency", "tolerance");
    for (name, r) in [("raw", &a.raw), ("pin-adjusted", &a.pin_adjusted)] {
        let _ = writeln!(
            out,
            "{name:<14} {:>10} {:>6} {:>11} {:>10.0e}",
            r.state_dim, r.rank, r.deficiency, r.tolerance
        );
    }
    out
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| config_err(THREADS_ENV, format!("expected a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::InvalidArgument(e.to_string()))
}

#[derive(Debug, Parser)]
#[command(name = "mimu", version, about = "Multi-IMU calibration filter simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CampaignArgs {
    /// YAML config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One simulation; writes per-run CSVs.
    Run {
        #[command(flatten)]
        campaign: CampaignArgs,
    },
    /// Seeded Monte Carlo campaign; writes summary.csv and convergence.csv.
    Montecarlo {
        #[command(flatten)]
        campaign: CampaignArgs,
        #[arg(long)]
        runs: Option<usize>,
        /// Also write per-run CSVs.
        #[arg(long)]
        per_run: bool,
    },
    /// Observability rank report at a generic state.
    Observability {
        #[arg(long, default_value_t = 2)]
        imus: usize,
        #[arg(long)]
        no_camera: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Write singular values to this CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Text tables from a summary CSV.
    Report {
        summary: PathBuf,
    },
}

fn load(args: &CampaignArgs) -> Result<Campaign> {
    let mut c = match &args.config {
        Some(p) => parse_config(p)?,
        None => Campaign::default(),
    };
    if let Some(s) = args.seed {
        c.sim.seed = s;
    }
    if let Some(o) = &args.output {
        c.output_dir = o.clone();
    }
    Ok(c)
}

pub fn cmd_run(c: &Campaign, out: &mut impl std::io::Write) -> Result<i32> {
    let record = run_single(&c.sim)?;
    let dir = write_run(&c.output_dir, &record)?;
    let s = summary_row(&record);
    writeln!(
        out,
        "{} ({} IMUs, seed {}): position RMSE {:.4} m, NEES {:.2}, written to {}",
        s.mode,
        s.n_imus,
        c.sim.seed,
        s.rmse_pos_m,
        s.nees_mean,
        dir.display()
    )?;
    if let Some(f) = &record.failure {
        writeln!(out, "diverged: {f}")?;
        return Ok(if c.divergence_budget == 0 { EXIT_DIVERGED } else { EXIT_OK });
    }
    Ok(EXIT_OK)
}

pub fn cmd_montecarlo(c: &Campaign, per_run: bool, out: &mut impl std::io::Write) -> Result<i32> {
    let pool = thread_pool()?;
    let records = pool.install(|| run_monte_carlo(&c.sim, c.runs))?;
    write(&c.output_dir.join("summary.csv"), &summary_csv(&records))?;
    write(&c.output_dir.join("convergence.csv"), &convergence_csv(&records))?;
    if per_run {
        for r in &records {
            write_run(&c.output_dir, r)?;
        }
    }
    let diverged = records.iter().filter(|r| r.diverged()).count();
    write!(out, "{}", convergence_table(&calibration_convergence(&records)))?;
    let rmse: Vec<f64> = records
        .iter()
        .filter(|r| !r.diverged())
        .filter_map(|r| summarize_run(r).ok().map(|s| s.rmse_position))
        .collect();
    writeln!(
        out,
        "{} runs, {diverged} diverged, median position RMSE {:.4} m",
        records.len(),
        median(&rmse)
    )?;
    if diverged > c.divergence_budget {
        writeln!(out, "divergence budget of {} exceeded", c.divergence_budget)?;
        return Ok(EXIT_DIVERGED);
    }
    Ok(EXIT_OK)
}

pub fn cmd_observability(
    n_imus: usize,
    camera: bool,
    seed: u64,
    csv_path: Option<&Path>,
    out: &mut impl std::io::Write,
) -> Result<i32> {
    let x = generic_state(n_imus, seed)?;
    let cam = CameraSpec::default();
    let a = analyze(&x, camera.then_some((&cam.model, &cam.landmarks)), None)?;
    write!(out, "{}", render_observability(&a, n_imus, camera))?;
    if let Some(p) = csv_path {
        let mut s = String::from("index,singular_value\n");
        for (i, v) in a.raw.singular_values.iter().enumerate() {
            csv_line(&mut s, [i.to_string(), fmt_float(*v)]);
        }
        write(p, &s)?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_report(summary: &Path, out: &mut impl std::io::Write) -> Result<i32> {
    let rows = read_summary(summary)?;
    write!(out, "{}", render_report(&rows))?;
    Ok(EXIT_OK)
}

/// Runs the command line and returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let mut stdout = std::io::stdout().lock();
    let result = match &cli.command {
        Command::Run { campaign } => load(campaign).and_then(|c| cmd_run(&c, &mut stdout)),
        Command::Montecarlo {
            campaign,
            runs,
            per_run,
        } => load(campaign).and_then(|mut c| {
            if let Some(n) = runs {
                if *n == 0 {
                    return Err(config_err("runs", "must be at least 1"));
                }
                c.runs = *n;
            }
            cmd_montecarlo(&c, *per_run, &mut stdout)
        }),
        Command::Observability {
            imus,
            no_camera,
            seed,
            csv,
        } => cmd_observability(*imus, !no_camera, *seed, csv.as_deref(), &mut stdout),
        Command::Report { summary } => cmd_report(summary, &mut stdout),
    };
    let _ = stdout.flush();
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}
