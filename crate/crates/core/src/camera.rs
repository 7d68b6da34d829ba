//! Known-landmark pinhole camera update.
//!
//! The camera observes fixed landmarks with known global positions. Its
//! extrinsics are known constants; only the body position and attitude enter
//! the measurement.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::so3::{skew, Quat};
use crate::state::{idx, FilterState};

/// Points closer than this along the optical axis are never projected.
pub const MIN_DEPTH: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub focal_px: f64,
    pub principal: Vector2<f64>,
    pub width: u32,
    pub height: u32,
    /// Camera to body.
    pub orientation: Quat,
    /// Camera origin in the body frame.
    pub position: Vector3<f64>,
    pub pixel_noise_std: f64,
    pub rate_hz: f64,
}

impl Default for CameraModel {
    /// 640x400 at f = 400 px, 20 Hz, looking along body +x.
    fn default() -> Self {
        CameraModel {
            focal_px: 400.0,
            principal: Vector2::new(320.0, 200.0),
            width: 640,
            height: 400,
            orientation: forward_looking(),
            position: Vector3::zeros(),
            pixel_noise_std: 0.5,
            rate_hz: 20.0,
        }
    }
}

/// Camera-to-body rotation with the optical axis along body +x, image x along
/// body -y and image y along body -z.
pub fn forward_looking() -> Quat {
    // columns are the camera axes expressed in the body frame
    let m = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    let r = nalgebra::Rotation3::from_matrix_unchecked(m);
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&r);
    Quat::new(q.w, q.i, q.j, q.k)
}

impl CameraModel {
    pub fn with_resolution(mut self, width: u32, height: u32) -> Self {
        self.width = width;
        self.height = height;
        self.principal = Vector2::new(width as f64 / 2.0, height as f64 / 2.0);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_px > 0.0) {
            return Err(Error::InvalidArgument("focal length must be positive".into()));
        }
        if !(self.pixel_noise_std > 0.0) || !(self.rate_hz > 0.0) {
            return Err(Error::InvalidArgument(
                "pixel noise and rate must be positive".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("empty image".into()));
        }
        Ok(())
    }

    pub fn in_frame(&self, uv: &Vector2<f64>) -> bool {
        uv.x >= 0.0 && uv.y >= 0.0 && uv.x < self.width as f64 && uv.y < self.height as f64
    }
}

/// Fixed landmarks in the global frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<Vector3<f64>>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("landmark set is empty".into()));
        }
        for (i, a) in points.iter().enumerate() {
            if points[..i].iter().any(|b| (a - b).norm() == 0.0) {
                return Err(Error::InvalidArgument(format!("landmark {i} is a duplicate")));
            }
        }
        Ok(LandmarkSet { points })
    }

    /// `nx * ny` grid in the plane `x = offset`, centred on the x axis.
    pub fn grid(nx: usize, ny: usize, spacing: f64, offset: f64) -> Result<Self> {
        if !(spacing > 0.0) {
            return Err(Error::InvalidArgument("grid spacing must be positive".into()));
        }
        let y0 = -(nx.saturating_sub(1) as f64) * spacing / 2.0;
        let z0 = -(ny.saturating_sub(1) as f64) * spacing / 2.0;
        let points = (0..ny)
            .flat_map(|j| {
                (0..nx).map(move |i| Vector3::new(offset, y0 + i as f64 * spacing, z0 + j as f64 * spacing))
            })
            .collect();
        Self::new(points)
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, i: usize) -> Result<&Vector3<f64>> {
        self.points.get(i).ok_or(Error::BadLandmark {
            index: i,
            count: self.points.len(),
        })
    }
}

/// Pixel observations of landmarks at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraSample {
    pub t: f64,
    pub observations: Vec<(usize, Vector2<f64>)>,
}

/// Landmark in the camera frame.
fn camera_point(position: &Vector3<f64>, orientation: &Quat, cam: &CameraModel, landmark: &Vector3<f64>) -> Vector3<f64> {
    let c_gb_t = orientation.to_rot().transpose();
    let c_bc_t = cam.orientation.to_rot().transpose();
    c_bc_t * (c_gb_t * (landmark - position) - cam.position)
}

/// Pixel coordinates ignoring the image bounds; `None` behind the camera.
pub fn project_unbounded(x: &FilterState, cam: &CameraModel, landmark: &Vector3<f64>) -> Option<Vector2<f64>> {
    let pc = camera_point(&x.body.position, &x.body.orientation, cam, landmark);
    if pc.z <= MIN_DEPTH {
        return None;
    }
    Some(Vector2::new(pc.x / pc.z, pc.y / pc.z) * cam.focal_px + cam.principal)
}

/// Pixel coordinates, or `None` when behind the camera or outside the image.
pub fn project(x: &FilterState, cam: &CameraModel, landmark: &Vector3<f64>) -> Option<Vector2<f64>> {
    project_pose(&x.body.position, &x.body.orientation, cam, landmark)
}

/// [`project`] for a bare body pose.
pub fn project_pose(
    position: &Vector3<f64>,
    orientation: &Quat,
    cam: &CameraModel,
    landmark: &Vector3<f64>,
) -> Option<Vector2<f64>> {
    let pc = camera_point(position, orientation, cam, landmark);
    if pc.z <= MIN_DEPTH {
        return None;
    }
    Some(Vector2::new(pc.x / pc.z, pc.y / pc.z) * cam.focal_px + cam.principal).filter(|uv| cam.in_frame(uv))
}

/// Projection and its Jacobian with respect to `[dp, dtheta]` of the body.
pub fn projection_jacobian(
    x: &FilterState,
    cam: &CameraModel,
    landmark: &Vector3<f64>,
) -> Option<(Vector2<f64>, SMatrix<f64, 2, 6>)> {
    pose_projection_jacobian(&x.body.position, &x.body.orientation, cam, landmark)
}

/// [`projection_jacobian`] for a bare body pose.
pub fn pose_projection_jacobian(
    position: &Vector3<f64>,
    orientation: &Quat,
    cam: &CameraModel,
    landmark: &Vector3<f64>,
) -> Option<(Vector2<f64>, SMatrix<f64, 2, 6>)> {
    let c_gb_t = orientation.to_rot().transpose();
    let c_bc_t = cam.orientation.to_rot().transpose();
    let rel_body = c_gb_t * (landmark - position);
    let pc = c_bc_t * (rel_body - cam.position);
    if pc.z <= MIN_DEPTH {
        return None;
    }
    let iz = 1.0 / pc.z;
    let uv = Vector2::new(pc.x * iz, pc.y * iz) * cam.focal_px + cam.principal;
    let dproj = SMatrix::<f64, 2, 3>::new(iz, 0.0, -pc.x * iz * iz, 0.0, iz, -pc.y * iz * iz) * cam.focal_px;
    let mut j = SMatrix::<f64, 2, 6>::zeros();
    j.fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(dproj * (-c_bc_t * c_gb_t)));
    j.fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&(dproj * c_bc_t * skew(&rel_body)));
    Some((uv, j))
}

/// Stacked Jacobian, innovation and noise for a camera sample. Observations
/// whose landmark is predicted behind the camera are skipped. `None` when
/// nothing usable remains.
#[allow(clippy::type_complexity)]
pub fn camera_update_terms(
    x: &FilterState,
    z: &CameraSample,
    cam: &CameraModel,
    landmarks: &LandmarkSet,
) -> Result<Option<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)>> {
    let mut rows = Vec::with_capacity(z.observations.len());
    for (id, uv) in &z.observations {
        let l = landmarks.get(*id)?;
        if let Some((pred, j)) = projection_jacobian(x, cam, l) {
            rows.push((uv - pred, j));
        }
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let m = 2 * rows.len();
    let mut h = DMatrix::zeros(m, x.dim());
    let mut r = DVector::zeros(m);
    for (k, (res, j)) in rows.iter().enumerate() {
        h.view_mut((2 * k, idx::POS), (2, 3))
            .copy_from(&j.fixed_view::<2, 3>(0, 0));
        h.view_mut((2 * k, idx::ATT), (2, 3))
            .copy_from(&j.fixed_view::<2, 3>(0, 3));
        r[2 * k] = res.x;
        r[2 * k + 1] = res.y;
    }
    let big_r = DMatrix::from_diagonal_element(m, m, cam.pixel_noise_std.powi(2));
    Ok(Some((h, r, big_r)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::quat_from_euler_zyx;
    use crate::state::{inject_error, BodyState, ImuCalibration};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state_at(position: Vector3<f64>, orientation: Quat) -> FilterState {
        let body = BodyState {
            position,
            orientation,
            ..BodyState::default()
        };
        FilterState::with_defaults(body, vec![ImuCalibration::reference()]).unwrap()
    }

    #[test]
    fn forward_looking_axes() {
        let r = forward_looking().to_rot();
        assert!((r * Vector3::z() - Vector3::x()).norm() < 1e-12);
        assert!((r * Vector3::x() + Vector3::y()).norm() < 1e-12);
    }

    #[test]
    fn on_axis_landmark_hits_principal_point() {
        let x = state_at(Vector3::zeros(), Quat::identity());
        let cam = CameraModel::default();
        let uv = project(&x, &cam, &Vector3::new(2.0, 0.0, 0.0)).unwrap();
        assert!((uv - cam.principal).norm() < 1e-12);
    }

    #[test]
    fn behind_camera_is_not_visible() {
        let x = state_at(Vector3::zeros(), Quat::identity());
        let cam = CameraModel::default();
        assert!(project(&x, &cam, &Vector3::new(-2.0, 0.0, 0.0)).is_none());
        assert!(project(&x, &cam, &Vector3::new(0.05, 0.0, 0.0)).is_none());
        // far off to the side: in front but out of frame
        assert!(project(&x, &cam, &Vector3::new(1.0, 5.0, 0.0)).is_none());
        assert!(project_unbounded(&x, &cam, &Vector3::new(1.0, 5.0, 0.0)).is_some());
    }

    #[test]
    fn grid_layout() {
        let l = LandmarkSet::grid(10, 10, 0.5, 5.0).unwrap();
        assert_eq!(l.len(), 100);
        assert!(l.points().iter().all(|p| p.x == 5.0));
        let ys: Vec<f64> = l.points().iter().map(|p| p.y).collect();
        assert!((ys.iter().cloned().fold(f64::MIN, f64::max) - 2.25).abs() < 1e-12);
        assert!(LandmarkSet::new(vec![]).is_err());
        assert!(LandmarkSet::new(vec![Vector3::x(), Vector3::x()]).is_err());
    }

    #[test]
    fn projection_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cam = CameraModel {
            position: Vector3::new(0.05, -0.02, 0.03),
            orientation: forward_looking() * quat_from_euler_zyx(0.02, -0.03, 0.01),
            ..CameraModel::default()
        };
        let mut checked = 0;
        while checked < 100 {
            let x = state_at(
                Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                quat_from_euler_zyx(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)),
            );
            let l = Vector3::new(5.0, rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            if project(&x, &cam, &l).is_none() {
                continue;
            }
            let (_, j) = projection_jacobian(&x, &cam, &l).unwrap();
            let h = 1e-6;
            let mut num = SMatrix::<f64, 2, 6>::zeros();
            for (col, state_idx) in [0, 1, 2, 9, 10, 11].into_iter().enumerate() {
                let mut d = nalgebra::DVector::zeros(x.dim());
                d[state_idx] = h;
                let p = project_unbounded(&inject_error(&x, &d).unwrap(), &cam, &l).unwrap();
                let m = project_unbounded(&inject_error(&x, &(-&d)).unwrap(), &cam, &l).unwrap();
                num.set_column(col, &((p - m) / (2.0 * h)));
            }
            assert!((j - num).amax() < 1e-5 * j.amax().max(1.0));
            checked += 1;
        }
    }

    #[test]
    fn update_terms_skip_and_stack() {
        let x = state_at(Vector3::zeros(), Quat::identity());
        let cam = CameraModel::default();
        let l = LandmarkSet::new(vec![Vector3::new(3.0, 0.1, 0.2), Vector3::new(-3.0, 0.0, 0.0)]).unwrap();
        let z = CameraSample {
            t: 0.0,
            observations: vec![(0, Vector2::new(300.0, 190.0)), (1, Vector2::new(320.0, 200.0))],
        };
        let (h, r, big_r) = camera_update_terms(&x, &z, &cam, &l).unwrap().unwrap();
        assert_eq!(h.nrows(), 2);
        assert_eq!(r.len(), 2);
        assert_eq!(big_r[(0, 0)], 0.25);
        assert!(h.columns(3, 6).iter().all(|v| *v == 0.0));
        let empty = CameraSample { t: 0.0, observations: vec![] };
        assert!(camera_update_terms(&x, &empty, &cam, &l).unwrap().is_none());
        let bad = CameraSample { t: 0.0, observations: vec![(7, Vector2::zeros())] };
        assert!(camera_update_terms(&x, &bad, &cam, &l).is_err());
    }
}
