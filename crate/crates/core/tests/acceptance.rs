//! Acceptance suite. Each test prints one `PASS` or `FAIL` line and then
//! asserts the same condition. Campaign-scale tests hold a shared lock so
//! their wall-clock runtimes are measured without contention.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use mimu::camera::{project_unbounded, projection_jacobian, CameraModel, LandmarkSet};
use mimu::eval::{calibration_convergence, median, summarize_run, ClassStatistics, ParamClass};
use mimu::imu_update::{compute_H_body, compute_H_calib, predict_imu_measurement};
use mimu::observability::{analyze, generic_state};
use mimu::propagation::{compute_F, predict_state};
use mimu::sim::{run_monte_carlo, run_single, FilterMode, ImuSpec, RunRecord, SimConfig};
use mimu::so3::{quat_from_euler_zyx, quat_from_rotvec};
use mimu::state::{gravity_vector, imu_offset, inject_error, state_difference, FilterState, ImuPreset, BODY_DIM, IMU_DIM};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn heavy() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Written straight to stdout so the line shows without `--nocapture`.
fn report(id: &str, pass: bool, detail: String) {
    let line = format!("{} criterion {id}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

#[test]
fn c1_observability_deficiency() {
    let start = Instant::now();
    let cam = CameraModel::default();
    let landmarks = LandmarkSet::grid(10, 10, 0.5, 5.0).unwrap();
    let mut imu_only = Vec::new();
    let mut with_camera = Vec::new();
    for n in 1..=3 {
        let x = generic_state(n, 100 + n as u64).unwrap();
        imu_only.push(analyze(&x, None, None).unwrap().pin_adjusted.deficiency);
        with_camera.push(analyze(&x, Some((&cam, &landmarks)), None).unwrap().pin_adjusted.deficiency);
    }
    let elapsed = start.elapsed();
    let imu_ok = imu_only.iter().all(|d| *d == 6);
    let cam_ok = with_camera.iter().all(|d| *d == 0);
    let time_ok = elapsed < Duration::from_secs(10);
    report(
        "1",
        imu_ok && cam_ok && time_ok,
        format!(
            "IMU-only deficiency for N=1,2,3 {imu_only:?} (want 6 each), with camera {with_camera:?} (want 0 each), {:.2} s (< 10 s)",
            elapsed.as_secs_f64()
        ),
    );
    assert!(cam_ok, "camera deficiencies {with_camera:?}");
    assert!(time_ok);
    assert!(imu_ok, "IMU-only deficiencies {imu_only:?}");
}

fn random_vec(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
}

/// A random state with every IMU unpinned, so every column is exercised.
fn random_state(rng: &mut ChaCha8Rng) -> FilterState {
    let mut x = generic_state(3, rng.random()).unwrap();
    x.body.position = random_vec(rng, 3.0);
    x.body.velocity = random_vec(rng, 2.0);
    x.body.specific_force = gravity_vector() * -1.0 + random_vec(rng, 3.0);
    x.body.orientation = quat_from_rotvec(&random_vec(rng, 1.5));
    x.body.angular_rate = random_vec(rng, 1.0);
    x.body.angular_accel = random_vec(rng, 2.0);
    for imu in &mut x.imus {
        imu.pinned = false;
    }
    x
}

/// `max |A - N| <= tol * max(max |A|, 1)`.
fn close(a: &DMatrix<f64>, n: &DMatrix<f64>, tol: f64) -> bool {
    (a - n).amax() <= tol * a.amax().max(1.0)
}

fn central<F>(x: &FilterState, cols: &[usize], rows: usize, f: F) -> DMatrix<f64>
where
    F: Fn(&FilterState) -> DVector<f64>,
{
    let h = 1e-6;
    let mut out = DMatrix::zeros(rows, cols.len());
    for (c, j) in cols.iter().enumerate() {
        let mut d = DVector::zeros(x.dim());
        d[*j] = h;
        let p = f(&inject_error(x, &d).unwrap());
        let m = f(&inject_error(x, &(-&d)).unwrap());
        out.set_column(c, &((p - m) / (2.0 * h)));
    }
    out
}

fn imu_prediction(x: &FilterState, i: usize) -> DVector<f64> {
    let (a, w) = predict_imu_measurement(x, i).unwrap();
    DVector::from_iterator(6, a.iter().chain(w.iter()).copied())
}

#[test]
fn c2_jacobians_match_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let g = gravity_vector();
    let tol = 1e-5;
    let (mut f_fail, mut hb_fail, mut hc_fail, mut cam_fail) = (0, 0, 0, 0);
    let cam = CameraModel {
        position: Vector3::new(0.05, -0.02, 0.03),
        orientation: mimu::camera::forward_looking() * quat_from_euler_zyx(0.02, -0.03, 0.01),
        ..CameraModel::default()
    };
    let mut cam_checked = 0;
    for _ in 0..100 {
        let x = random_state(&mut rng);
        let n = x.dim();
        let all: Vec<usize> = (0..n).collect();

        let dt = rng.random_range(0.001..0.5);
        let f = compute_F(&x, dt).unwrap();
        let base = predict_state(&x, dt, &g).unwrap();
        let num = central(&x, &all, n, |y| {
            state_difference(&predict_state(y, dt, &g).unwrap(), &base).unwrap()
        });
        f_fail += !close(&f, &num, tol) as usize;

        for i in 0..x.n_imus() {
            let hb = DMatrix::from_column_slice(6, BODY_DIM, compute_H_body(&x, i).unwrap().as_slice());
            let num = central(&x, &(0..BODY_DIM).collect::<Vec<_>>(), 6, |y| imu_prediction(y, i));
            hb_fail += !close(&hb, &num, tol) as usize;

            let hc = DMatrix::from_column_slice(6, IMU_DIM, compute_H_calib(&x, i).unwrap().as_slice());
            let o = imu_offset(i);
            let num = central(&x, &(o..o + IMU_DIM).collect::<Vec<_>>(), 6, |y| imu_prediction(y, i));
            hc_fail += !close(&hc, &num, tol) as usize;
        }

        // a landmark in front of the camera at a random depth
        let x_cam = {
            let mut y = x.clone();
            y.body.orientation = quat_from_euler_zyx(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            );
            y
        };
        let dir = x_cam.body.orientation.rotate(&Vector3::new(1.0, rng.random_range(-0.3..0.3), rng.random_range(-0.2..0.2)));
        let l = x_cam.body.position + dir * rng.random_range(2.0..8.0);
        if let Some((_, j)) = projection_jacobian(&x_cam, &cam, &l) {
            let j = DMatrix::from_column_slice(2, 6, j.as_slice());
            let num = central(&x_cam, &[0, 1, 2, 9, 10, 11], 2, |y| {
                let uv = project_unbounded(y, &cam, &l).unwrap();
                DVector::from_column_slice(uv.as_slice())
            });
            cam_fail += !close(&j, &num, tol) as usize;
            cam_checked += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = f_fail + hb_fail + hc_fail + cam_fail == 0 && cam_checked == 100 && elapsed < Duration::from_secs(30);
    report(
        "2",
        pass,
        format!(
            "mismatches at 100 states (rel tol 1e-5): F {f_fail}, H_body {hb_fail}, H_calib {hc_fail}, camera {cam_fail} of {cam_checked}; {:.2} s (< 30 s)",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn c3_zero_noise_round_trip() {
    let _guard = heavy();
    let cfg = SimConfig {
        seed: 3,
        duration_s: 30.0,
        ..SimConfig::default()
    }
    .zero_noise();
    let start = Instant::now();
    let rec = run_single(&cfg).unwrap();
    let elapsed = start.elapsed();
    let mut max_p: f64 = 0.0;
    let mut max_th: f64 = 0.0;
    for e in &rec.epochs {
        let err = mimu::eval::pose_error(&e.truth, &e.estimate);
        max_p = max_p.max(err.fixed_rows::<3>(0).norm());
        max_th = max_th.max(err.fixed_rows::<3>(3).norm());
    }
    let pass = !rec.diverged() && max_p < 1e-3 && max_th < 1e-4 && elapsed < Duration::from_secs(10);
    report(
        "3",
        pass,
        format!(
            "max position error {max_p:.3e} m (< 1e-3), max attitude error {max_th:.3e} rad (< 1e-4) over {} epochs; {:.2} s (< 10 s)",
            rec.epochs.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

/// The desk-scale calibration campaign shared by criteria 4, 6 and 7:
/// 100 runs of 60 s with the default VN-300 + VN-100 setup, covariance
/// health checked after every update.
struct Campaign {
    records: Vec<RunRecord>,
    elapsed: Duration,
}

fn campaign() -> &'static Campaign {
    static CAMPAIGN: OnceLock<Campaign> = OnceLock::new();
    CAMPAIGN.get_or_init(|| {
        let _guard = heavy();
        let cfg = SimConfig {
            seed: 4,
            duration_s: 60.0,
            check_health: true,
            ..SimConfig::default()
        };
        assert_eq!(cfg.imus[0].noise, ImuPreset::Vn300.noise());
        assert_eq!(cfg.imus[1].noise, ImuPreset::Vn100.noise());
        let start = Instant::now();
        let records = run_monte_carlo(&cfg, 100).unwrap();
        Campaign {
            records,
            elapsed: start.elapsed(),
        }
    })
}

fn class_stats(stats: &[ClassStatistics], class: ParamClass) -> &ClassStatistics {
    stats.iter().find(|s| s.class == class).unwrap()
}

#[test]
fn c4_calibration_convergence() {
    let c = campaign();
    let stats = calibration_convergence(&c.records);
    // reporting units: mm, mrad, mm/s^2, mrad/s
    let limits = [
        (ParamClass::Position, 5.0),
        (ParamClass::Orientation, 5.0),
        (ParamClass::AccelBias, 10.0),
        (ParamClass::GyroBias, 5.0),
    ];
    let mut all = true;
    for (class, limit) in limits {
        let s = class_stats(&stats, class);
        let pass = s.median_abs <= limit && s.reduction() >= 5.0;
        all &= pass;
        report(
            &format!("4 {}", class.name()),
            pass,
            format!(
                "median |e| {:.3} {} (<= {limit}), std {:.3} vs init {:.3}, reduction {:.1}x (>= 5x)",
                s.median_abs,
                class.unit(),
                s.std,
                s.init_std,
                s.reduction()
            ),
        );
    }
    let diverged = c.records.iter().filter(|r| r.diverged()).count();
    let time_ok = c.elapsed < Duration::from_secs(600);
    report(
        "4 runtime",
        time_ok,
        format!("100 x 60 s in {:.1} s (< 600 s), {diverged} diverged", c.elapsed.as_secs_f64()),
    );
    assert!(time_ok);
    assert!(all, "calibration convergence criterion not met");
}

#[test]
fn c5_multi_imu_benefit() {
    let _guard = heavy();
    let start = Instant::now();
    let base = SimConfig {
        seed: 5,
        duration_s: 60.0,
        ..SimConfig::default()
    };
    let median_rmse = |cfg: SimConfig| {
        let runs = run_monte_carlo(&cfg, 20).unwrap();
        assert!(runs.iter().all(|r| !r.diverged()));
        let v: Vec<f64> = runs.iter().map(|r| summarize_run(r).unwrap().rmse_position).collect();
        median(&v)
    };
    let single = median_rmse(SimConfig {
        mode: FilterMode::SinglePredictor,
        imus: base.imus[..1].to_vec(),
        ..base.clone()
    });
    let two = median_rmse(base.clone());
    let mut three_imus = base.imus.clone();
    three_imus.push(ImuSpec::new(ImuPreset::Vn100.noise()).with_extrinsics(
        Vector3::new(-0.08, 0.06, -0.02),
        Vector3::new(-0.2, 0.1, 0.25),
    ));
    let three = median_rmse(SimConfig {
        imus: three_imus,
        ..base
    });
    let elapsed = start.elapsed();
    let pass = two < single && three <= two && elapsed < Duration::from_secs(300);
    report(
        "5",
        pass,
        format!(
            "median position RMSE over 20 seeds: single_predictor {single:.5} m, 2-IMU {two:.5} m, 3-IMU {three:.5} m; {:.1} s (< 300 s)",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn c6_consistency() {
    let c = campaign();
    let ok: Vec<&RunRecord> = c.records.iter().filter(|r| !r.diverged()).collect();
    let stats = calibration_convergence(&c.records);
    let mut all = true;
    for class in ParamClass::ALL {
        let s = class_stats(&stats, class);
        let pass = s.final_coverage >= 0.90;
        all &= pass;
        report(
            &format!("6 coverage {}", class.name()),
            pass,
            format!("final-epoch 3-sigma coverage {:.3} (>= 0.90)", s.final_coverage),
        );
    }
    let nees: Vec<f64> = ok.iter().map(|r| summarize_run(r).unwrap().nees_mean).collect();
    let mean_nees = nees.iter().sum::<f64>() / nees.len() as f64;
    let nees_ok = (4.0..=9.0).contains(&mean_nees);
    report("6 nees", nees_ok, format!("mean body NEES {mean_nees:.3} over {} runs (within [4, 9])", nees.len()));
    assert!(nees_ok);
    assert!(all, "coverage criterion not met");
}

#[test]
fn c7_covariance_health() {
    let c = campaign();
    let failures: Vec<String> = c
        .records
        .iter()
        .filter_map(|r| r.failure.as_ref().map(|f| format!("run {}: {f}", r.run_id)))
        .collect();
    report(
        "7",
        failures.is_empty(),
        format!(
            "{} of {} runs of 60 s failed a post-update symmetry (1e-12 |P|inf) or eigenvalue (>= -1e-9) check or diverged",
            failures.len(),
            c.records.len()
        ),
    );
    assert!(failures.is_empty(), "{failures:?}");
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn c8_determinism() {
    let _guard = heavy();
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("config.yaml");
    fs::write(&config, "duration_s: 8\nruns: 4\nseed: 8\n").unwrap();
    let trees: Vec<_> = [("a", "1"), ("b", "3")]
        .into_iter()
        .map(|(name, threads)| {
            let out = tmp.path().join(name);
            let status = Command::new(env!("CARGO_BIN_EXE_mimu"))
                .args(["montecarlo", "--per-run", "--config"])
                .arg(&config)
                .arg("--output")
                .arg(&out)
                .env("MIMU_THREADS", threads)
                .output()
                .unwrap();
            assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
            read_tree(&out)
        })
        .collect();
    let files = trees[0].len();
    let pass = files > 0 && trees[0] == trees[1];
    report(
        "8",
        pass,
        format!("two montecarlo invocations (1 and 3 threads) wrote {files} files, byte-identical: {pass}"),
    );
    assert!(pass);
}
