//! Observability matrix construction and numerical rank analysis.

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{camera_update_terms, project_unbounded, CameraModel, CameraSample, LandmarkSet};
use crate::error::{Error, Result};
use crate::imu_update::imu_jacobian;
use crate::propagation::{compute_F, predict_state};
use crate::so3::quat_from_euler_zyx;
use crate::state::{gravity_vector, idx, imu_offset, BodyState, FilterState, ImuCalibration, GRAVITY};

/// Relative singular-value threshold for numerical rank.
pub const RANK_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ObservabilityReport {
    pub state_dim: usize,
    pub rank: usize,
    pub deficiency: usize,
    /// Descending.
    pub singular_values: Vec<f64>,
    pub tolerance: f64,
}

/// Stacks `H F^k` for `k = 0..=order`; `order` defaults to the state dimension.
#[allow(non_snake_case)]
pub fn build_observability_matrix(F: &DMatrix<f64>, H: &DMatrix<f64>, order: Option<usize>) -> Result<DMatrix<f64>> {
    let n = F.nrows();
    if !F.is_square() {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: F.ncols(),
        });
    }
    if H.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: H.ncols(),
        });
    }
    let order = order.unwrap_or(n);
    let m = H.nrows();
    let mut o = DMatrix::zeros(m * (order + 1), n);
    let mut block = H.clone();
    for k in 0..=order {
        o.view_mut((k * m, 0), (m, n)).copy_from(&block);
        if k < order {
            block = &block * F;
        }
    }
    Ok(o)
}

/// Time-varying form: `steps[k] = (H_k, F_k)` with `F_k` the transition from
/// step `k` to `k + 1`. Rows are `H_k F_{k-1} ... F_0`.
pub fn build_time_varying_observability(steps: &[(DMatrix<f64>, DMatrix<f64>)]) -> Result<DMatrix<f64>> {
    let Some((h0, _)) = steps.first() else {
        return Err(Error::InvalidArgument("no steps".into()));
    };
    let n = h0.ncols();
    let total: usize = steps.iter().map(|(h, _)| h.nrows()).sum();
    let mut o = DMatrix::zeros(total, n);
    let mut phi = DMatrix::<f64>::identity(n, n);
    let mut row = 0;
    for (h, f) in steps {
        if h.ncols() != n || f.nrows() != n || f.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: h.ncols(),
            });
        }
        let block = h * &phi;
        o.view_mut((row, 0), (h.nrows(), n)).copy_from(&block);
        row += h.nrows();
        phi = f * phi;
    }
    Ok(o)
}

/// Numerical rank: singular values above `RANK_TOLERANCE * sigma_max`.
pub fn rank_report(o: &DMatrix<f64>) -> ObservabilityReport {
    rank_report_with_tolerance(o, RANK_TOLERANCE)
}

pub fn rank_report_with_tolerance(o: &DMatrix<f64>, tol: f64) -> ObservabilityReport {
    let n = o.ncols();
    // Columns are equilibrated so that states in different units compare
    // fairly; all-zero columns stay zero.
    let mut scaled = o.clone();
    for mut c in scaled.column_iter_mut() {
        let norm = c.norm();
        if norm > 0.0 {
            c /= norm;
        }
    }
    let mut sv: Vec<f64> = if scaled.nrows() >= n {
        scaled.svd(false, false).singular_values.iter().copied().collect()
    } else {
        scaled.transpose().svd(false, false).singular_values.iter().copied().collect()
    };
    sv.sort_by(|a, b| b.total_cmp(a));
    sv.resize(n, 0.0);
    let smax = sv.first().copied().unwrap_or(0.0);
    let rank = sv.iter().filter(|s| **s > tol * smax).count();
    ObservabilityReport {
        state_dim: n,
        rank,
        deficiency: n - rank,
        singular_values: sv,
        tolerance: tol,
    }
}

/// Drops the given columns (e.g. pinned extrinsics) before ranking.
pub fn rank_report_excluding(o: &DMatrix<f64>, excluded: &[usize]) -> ObservabilityReport {
    let keep: Vec<usize> = (0..o.ncols()).filter(|c| !excluded.contains(c)).collect();
    let reduced = o.select_columns(keep.iter());
    rank_report(&reduced)
}

/// Step used when linearizing along a propagated state.
pub const ANALYSIS_STEP: f64 = 0.1;

/// Raw figures count every error-state column; the adjusted ones drop the
/// pinned extrinsic columns, which are zero by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservabilityAnalysis {
    pub raw: ObservabilityReport,
    pub pin_adjusted: ObservabilityReport,
}

/// Error-state columns held at zero by pinning.
pub fn pinned_columns(x: &FilterState) -> Vec<usize> {
    x.imus
        .iter()
        .enumerate()
        .filter(|(_, c)| c.pinned)
        .flat_map(|(i, _)| {
            let o = imu_offset(i);
            o + idx::EXT_POS..o + idx::EXT_ROT + 3
        })
        .collect()
}

fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.random_range(-scale..scale))
}

/// A seeded state with nonzero rate, angular acceleration and specific force,
/// distinct lever arms and nonzero biases. IMU 0 is the pinned reference.
pub fn generic_state(n_imus: usize, seed: u64) -> Result<FilterState> {
    if n_imus == 0 {
        return Err(Error::NoImus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body = BodyState {
        position: random_vec(&mut rng, 0.2),
        velocity: random_vec(&mut rng, 0.2),
        specific_force: Vector3::new(0.0, 0.0, GRAVITY) + random_vec(&mut rng, 0.3),
        orientation: quat_from_euler_zyx(
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
        ),
        angular_rate: random_vec(&mut rng, 0.3),
        angular_accel: random_vec(&mut rng, 0.3),
    };
    let mut imus = vec![ImuCalibration::reference().with_biases(random_vec(&mut rng, 0.05), random_vec(&mut rng, 0.01))];
    for _ in 1..n_imus {
        let q = quat_from_euler_zyx(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        imus.push(
            ImuCalibration::new(random_vec(&mut rng, 0.2), q)
                .with_biases(random_vec(&mut rng, 0.05), random_vec(&mut rng, 0.01)),
        );
    }
    FilterState::with_defaults(body, imus)
}

fn measurement_rows(x: &FilterState, camera: Option<(&CameraModel, &LandmarkSet)>) -> Result<DMatrix<f64>> {
    let mut blocks = Vec::with_capacity(x.n_imus() + 1);
    for i in 0..x.n_imus() {
        blocks.push(imu_jacobian(x, i, true)?);
    }
    if let Some((cam, landmarks)) = camera {
        let observations: Vec<_> = landmarks
            .points()
            .iter()
            .enumerate()
            .filter_map(|(id, l)| project_unbounded(x, cam, l).map(|uv| (id, uv)))
            .collect();
        let sample = CameraSample { t: x.t, observations };
        if let Some((h, _, _)) = camera_update_terms(x, &sample, cam, landmarks)? {
            blocks.push(h);
        }
    }
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut h = DMatrix::zeros(rows, x.dim());
    let mut r = 0;
    for b in &blocks {
        h.view_mut((r, 0), (b.nrows(), x.dim())).copy_from(b);
        r += b.nrows();
    }
    Ok(h)
}

/// Ranks the observability matrix obtained by linearizing every IMU (and
/// optionally the camera) along `steps` propagation steps from `x`.
/// `steps` defaults to the state dimension.
pub fn analyze(
    x: &FilterState,
    camera: Option<(&CameraModel, &LandmarkSet)>,
    steps: Option<usize>,
) -> Result<ObservabilityAnalysis> {
    let steps = steps.unwrap_or(x.dim()).max(1);
    let g = gravity_vector();
    let mut stack = Vec::with_capacity(steps);
    let mut xk = x.clone();
    for _ in 0..steps {
        let f = compute_F(&xk, ANALYSIS_STEP)?;
        stack.push((measurement_rows(&xk, camera)?, f));
        xk = predict_state(&xk, ANALYSIS_STEP, &g)?;
    }
    let o = build_time_varying_observability(&stack)?;
    Ok(ObservabilityAnalysis {
        raw: rank_report(&o),
        pin_adjusted: rank_report_excluding(&o, &pinned_columns(x)),
    })
}
