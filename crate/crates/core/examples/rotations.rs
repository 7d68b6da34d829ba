//! Quaternion and rotation-vector round trips.

use mimu::so3::{omega_matrix, quat_from_euler_zyx, quat_from_rotvec, quat_mul, right_jacobian, rotvec_from_quat, skew};
use nalgebra::{Vector3, Vector4};

fn main() {
    let q = quat_from_euler_zyx(0.1, -0.2, 0.7);
    let phi = rotvec_from_quat(&q);
    println!("q = {:?}", q.as_array());
    println!("log(q) = {:.6?}", phi.as_slice());
    println!("exp(log(q)) = {:?}", quat_from_rotvec(&phi).as_array());

    // composing two small rotations
    let dq = quat_from_rotvec(&Vector3::new(0.0, 0.0, 1e-3));
    let r = quat_mul(&q, &dq);
    println!("rotvec(q^-1 (q dq)) = {:.3?}", rotvec_from_quat(&(q.inverse() * r)).as_slice());

    let v = Vector3::new(1.0, 2.0, 3.0);
    println!("C(q) v = {:.6?}", q.rotate(&v).as_slice());
    println!("skew(v) v = {:?}", (skew(&v) * v).as_slice());

    // quaternion rate for a body rate
    let w = Vector3::new(0.1, 0.0, -0.3);
    let qv = Vector4::new(q.w, q.x, q.y, q.z);
    println!("q_dot = {:.6?}", (omega_matrix(&w) * qv * 0.5).as_slice());
    println!("Jr(phi) = {:.4}", right_jacobian(&phi));
}
