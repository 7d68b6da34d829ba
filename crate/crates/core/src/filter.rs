//! The multi-IMU filter: propagation between asynchronous measurements and the
//! IMU and camera updates.

use nalgebra::{DMatrix, Vector3};

use crate::camera::{camera_update_terms, CameraModel, CameraSample, LandmarkSet};
use crate::error::{Error, Result};
use crate::imu_update::{apply_update, imu_innovation, imu_jacobian, mahalanobis_sq, ChiSquareGate, ImuSample};
use crate::propagation::{propagate_to, ProcessNoise};
use crate::state::{check_covariance, gravity_vector, FilterState};

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOptions {
    /// Estimate calibration states (bias noise and calibration Jacobians on).
    pub calibrating: bool,
    /// Innovation gate for IMU updates. Off by default.
    pub gate: Option<ChiSquareGate>,
    /// Verify covariance symmetry and eigenvalue floor after every update.
    pub check_health: bool,
}

impl Default for FilterOptions {
    fn default() -> Self {
        FilterOptions {
            calibrating: true,
            gate: None,
            check_health: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateOutcome {
    Applied,
    /// Older than the filter time; dropped without touching the state.
    Stale,
    /// Rejected by the innovation gate.
    Gated { mahalanobis_sq: f64 },
    /// Nothing usable in the sample.
    Empty,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UpdateCounts {
    pub applied: usize,
    pub stale: usize,
    pub gated: usize,
}

#[derive(Debug, Clone)]
pub struct MultiImuFilter {
    pub state: FilterState,
    pub noise: ProcessNoise,
    pub gravity: Vector3<f64>,
    pub options: FilterOptions,
    counts: UpdateCounts,
    last_nis: Option<f64>,
    last_innovation_norm: Option<f64>,
}

impl MultiImuFilter {
    pub fn new(state: FilterState, noise: ProcessNoise, options: FilterOptions) -> Self {
        MultiImuFilter {
            state,
            noise,
            gravity: gravity_vector(),
            options,
            counts: UpdateCounts::default(),
            last_nis: None,
            last_innovation_norm: None,
        }
    }

    pub fn counts(&self) -> UpdateCounts {
        self.counts
    }

    /// Normalized innovation squared of the most recent applied update.
    pub fn last_nis(&self) -> Option<f64> {
        self.last_nis
    }

    /// Euclidean norm of the most recent applied innovation.
    pub fn last_innovation_norm(&self) -> Option<f64> {
        self.last_innovation_norm
    }

    pub fn propagate_to(&mut self, t: f64) -> Result<()> {
        propagate_to(&mut self.state, t, &self.noise, self.options.calibrating, &self.gravity)
    }

    /// A copy of the state propagated to `t` (no measurement applied).
    pub fn predicted_at(&self, t: f64) -> Result<FilterState> {
        let mut x = self.state.clone();
        propagate_to(&mut x, t, &self.noise, self.options.calibrating, &self.gravity)?;
        Ok(x)
    }

    /// Propagates to the sample time and applies the IMU update.
    pub fn process_imu(&mut self, z: &ImuSample) -> Result<UpdateOutcome> {
        if z.t < self.state.t {
            self.counts.stale += 1;
            return Ok(UpdateOutcome::Stale);
        }
        if z.imu_id >= self.state.n_imus() {
            return Err(Error::BadImuIndex {
                index: z.imu_id,
                count: self.state.n_imus(),
            });
        }
        self.propagate_to(z.t)?;
        let h = imu_jacobian(&self.state, z.imu_id, self.options.calibrating)?;
        let r = imu_innovation(&self.state, z)?;
        let big_r = DMatrix::from_column_slice(6, 6, z.noise.as_slice());
        if let Some(gate) = &self.options.gate {
            let d2 = mahalanobis_sq(&self.state, &h, &r, &big_r)?;
            if !gate.accepts(d2) {
                self.counts.gated += 1;
                return Ok(UpdateOutcome::Gated { mahalanobis_sq: d2 });
            }
        }
        self.update(&h, &r, &big_r)
    }

    /// Propagates to the sample time and applies one joint update over all
    /// observed landmarks.
    pub fn process_camera(
        &mut self,
        z: &CameraSample,
        cam: &CameraModel,
        landmarks: &LandmarkSet,
    ) -> Result<UpdateOutcome> {
        if z.t < self.state.t {
            self.counts.stale += 1;
            return Ok(UpdateOutcome::Stale);
        }
        if z.observations.is_empty() {
            return Ok(UpdateOutcome::Empty);
        }
        self.propagate_to(z.t)?;
        match camera_update_terms(&self.state, z, cam, landmarks)? {
            Some((h, r, big_r)) => self.update(&h, &r, &big_r),
            None => Ok(UpdateOutcome::Empty),
        }
    }

    fn update(&mut self, h: &DMatrix<f64>, r: &nalgebra::DVector<f64>, big_r: &DMatrix<f64>) -> Result<UpdateOutcome> {
        self.last_innovation_norm = Some(r.norm());
        self.last_nis = Some(apply_update(&mut self.state, h, r, big_r)?);
        if !self.state.is_finite() {
            return Err(Error::NonFinite);
        }
        if self.options.check_health {
            check_covariance(&self.state.cov)?;
        }
        self.counts.applied += 1;
        Ok(UpdateOutcome::Applied)
    }
}
