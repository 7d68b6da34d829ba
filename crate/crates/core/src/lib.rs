//! Centralized multi-IMU error-state EKF with online calibration.
//!
//! Every IMU sample is a measurement update against a body state that carries
//! its own specific force, angular rate and angular acceleration, so IMUs need
//! not be synchronized. Each IMU optionally carries extrinsic (lever arm,
//! orientation) and intrinsic (bias) calibration states. A known-landmark
//! camera update supplies the exteroceptive information that makes the
//! calibration observable.
//!
//! Modules, bottom-up:
//!
//! - [`so3`]: quaternion and rotation utilities
//! - [`state`]: state vector, error-state layout, covariance bookkeeping
//! - [`propagation`]: transition, its Jacobian, process noise
//! - [`imu_update`]: IMU measurement model, Jacobians, EKF update
//! - [`camera`]: pinhole landmark update
//! - [`filter`]: the multi-IMU filter driving propagation and updates
//! - [`baseline`]: single-IMU predictor used as the comparison baseline
//! - [`observability`]: observability matrix and rank report
//! - [`sim`]: trajectories, sensor simulation, Monte Carlo campaigns
//! - [`eval`]: error metrics and convergence statistics
//! - [`cli`]: config files, commands and CSV output

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod camera;
pub mod cli;
pub mod error;
pub mod eval;
pub mod filter;
pub mod imu_update;
pub mod observability;
pub mod propagation;
pub mod sim;
pub mod so3;
pub mod state;

pub use error::{Error, Result};
pub use filter::{FilterOptions, MultiImuFilter};
pub use so3::Quat;
pub use state::{BodyState, FilterState, ImuCalibration, NoiseParams};
