//! Quaternion and rotation utilities.
//!
//! Conventions: Hamilton product, scalar-first storage, passive rotations.
//! `quat_to_rot(q_GB)` maps body-frame vectors into the global frame, so its
//! transpose maps global vectors into the body frame.

use nalgebra::{Matrix3, Matrix4, Vector3};
use std::ops::Mul;

/// Below this rotation angle the exponential and logarithm use series
/// expansions instead of the closed forms.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Unit quaternion with the scalar part first and `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quat {
    fn default() -> Self {
        Self::identity()
    }
}

impl Quat {
    pub const fn identity() -> Self {
        Quat {
            w: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    /// Builds a quaternion from raw components, normalizing and fixing the sign.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }.normalized()
    }

    pub fn vec(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Unit norm, canonical sign.
    pub fn normalized(self) -> Self {
        let n = self.norm();
        let s = if self.w < 0.0 { -1.0 / n } else { 1.0 / n };
        Quat {
            w: self.w * s,
            x: self.x * s,
            y: self.y * s,
            z: self.z * s,
        }
    }

    pub fn conjugate(&self) -> Self {
        Quat {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Inverse rotation.
    pub fn inverse(&self) -> Self {
        self.conjugate()
    }

    pub fn to_rot(&self) -> Matrix3<f64> {
        quat_to_rot(self)
    }

    /// Rotates `v` by this quaternion (`C(q) v`).
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        quat_to_rot(self) * v
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|c| c.is_finite())
    }
}

impl Mul for Quat {
    type Output = Quat;
    fn mul(self, rhs: Quat) -> Quat {
        quat_mul(&self, &rhs)
    }
}

/// Cross-product matrix: `skew(v) * u == v.cross(u)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// The 4x4 rate matrix with `-skew(w)` in the upper-left block, `w` in the
/// last column, `-w^T` in the last row and a zero corner, so that
/// `qdot = 0.5 * omega_matrix(w) * q` for a vector-first quaternion `[x y z w]`
/// and body rate `w`. The matrix is antisymmetric, so the flow preserves norm.
///
/// The filter itself stores quaternions scalar-first and propagates
/// orientation through [`quat_from_rotvec`].
pub fn omega_matrix(w: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(w)));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(w);
    m.fixed_view_mut::<1, 3>(3, 0).copy_from(&(-w.transpose()));
    m
}

/// Rotation-vector exponential.
pub fn quat_from_rotvec(theta: &Vector3<f64>) -> Quat {
    let angle = theta.norm();
    if angle < SMALL_ANGLE {
        let half = theta * 0.5;
        return Quat::new(1.0 - 0.125 * angle * angle, half.x, half.y, half.z);
    }
    let axis = theta / angle;
    let (s, c) = (0.5 * angle).sin_cos();
    Quat::new(c, axis.x * s, axis.y * s, axis.z * s)
}

/// Rotation-vector logarithm; the result has norm at most pi.
pub fn rotvec_from_quat(q: &Quat) -> Vector3<f64> {
    let q = q.normalized();
    let v = q.vec();
    let s = v.norm();
    if s < SMALL_ANGLE {
        // 2 * v / w to second order.
        return v * (2.0 / q.w);
    }
    let angle = 2.0 * s.atan2(q.w);
    v * (angle / s)
}

pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    Quat {
        w: a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        x: a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        y: a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        z: a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    }
    .normalized()
}

pub fn quat_to_rot(q: &Quat) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Right Jacobian of SO(3): `exp(phi + d) ~= exp(phi) * exp(jr(phi) d)`.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let angle = phi.norm();
    let k = skew(phi);
    if angle < 1e-5 {
        return Matrix3::identity() - k * 0.5 + k * k / 6.0;
    }
    let a2 = angle * angle;
    Matrix3::identity() - k * ((1.0 - angle.cos()) / a2) + k * k * ((angle - angle.sin()) / (a2 * angle))
}

/// Orientation from ZYX Euler angles: `Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn quat_from_euler_zyx(roll: f64, pitch: f64, yaw: f64) -> Quat {
    let qz = quat_from_rotvec(&Vector3::new(0.0, 0.0, yaw));
    let qy = quat_from_rotvec(&Vector3::new(0.0, pitch, 0.0));
    let qx = quat_from_rotvec(&Vector3::new(roll, 0.0, 0.0));
    qz * qy * qx
}
