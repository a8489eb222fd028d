//! Quaternion algebra and hierarchical forward kinematics.
//!
//! Plain-value functions live here. The differentiable FK layer used inside
//! training graphs is [`crate::nn::Graph::forward_kinematics`], which shares
//! [`quat_to_matrix`] and the traversal order with [`forward_kinematics`].

use crate::error::{DfnError, Result};
use crate::mocap::Skeleton;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Rotation quaternion `w + xi + yj + zk`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub const MIN_QUAT_NORM: f64 = 1e-8;

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, x, y, z }
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = norm3(axis);
        let (s, c) = (0.5 * angle).sin_cos();
        Quaternion::new(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Quaternion::new(v[0], v[1], v[2], v[3])
    }

    pub fn conjugate(&self) -> Self {
        Quaternion::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product: `self * rhs` applies `rhs` first.
    pub fn mul(&self, rhs: &Quaternion) -> Quaternion {
        let (a, b) = (self, rhs);
        Quaternion::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    /// Same-rotation test that treats `q` and `-q` as equal.
    pub fn same_rotation(&self, other: &Quaternion, tol: f64) -> bool {
        let d = self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z;
        (d.abs() - 1.0).abs() < tol
    }
}

/// Normalizes `q`; `joint` is only used to label the error.
pub fn quat_normalize(q: Quaternion, joint: usize) -> Result<Quaternion> {
    let n = q.norm();
    if !(n > MIN_QUAT_NORM) {
        return Err(DfnError::DegenerateQuaternion { joint, norm: n });
    }
    Ok(Quaternion::new(q.w / n, q.x / n, q.y / n, q.z / n))
}

pub fn quat_rotate(q: &Quaternion, v: Vec3) -> Vec3 {
    mat_vec(&quat_to_matrix(q), v)
}

/// Rotation matrix of a unit quaternion (column-vector convention).
pub fn quat_to_matrix(q: &Quaternion) -> Mat3 {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Unit quaternion from a rotation matrix (Shepperd's method).
pub fn matrix_to_quat(m: &Mat3) -> Quaternion {
    let tr = m[0][0] + m[1][1] + m[2][2];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        Quaternion::new(
            0.25 * s,
            (m[2][1] - m[1][2]) / s,
            (m[0][2] - m[2][0]) / s,
            (m[1][0] - m[0][1]) / s,
        )
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        Quaternion::new(
            (m[2][1] - m[1][2]) / s,
            0.25 * s,
            (m[0][1] + m[1][0]) / s,
            (m[0][2] + m[2][0]) / s,
        )
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        Quaternion::new(
            (m[0][2] - m[2][0]) / s,
            (m[0][1] + m[1][0]) / s,
            0.25 * s,
            (m[1][2] + m[2][1]) / s,
        )
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        Quaternion::new(
            (m[1][0] - m[0][1]) / s,
            (m[0][2] + m[2][0]) / s,
            (m[1][2] + m[2][1]) / s,
            0.25 * s,
        )
    };
    let n = q.norm();
    Quaternion::new(q.w / n, q.x / n, q.y / n, q.z / n)
}

/// Root-relative joint positions (root at the origin, root translation
/// excluded), flattened as `[x0, y0, z0, x1, ...]`.
pub fn forward_kinematics(skeleton: &Skeleton, rotations: &[Quaternion]) -> Vec<f64> {
    let world = forward_kinematics_world(skeleton, rotations, [0.0; 3]);
    world.iter().flat_map(|p| p.iter().copied()).collect()
}

/// Hierarchical FK with the root placed at `root_position`.
pub fn forward_kinematics_world(skeleton: &Skeleton, rotations: &[Quaternion], root_position: Vec3) -> Vec<Vec3> {
    assert_eq!(rotations.len(), skeleton.len(), "one rotation per joint");
    let n = skeleton.len();
    let mut world_rot: Vec<Mat3> = Vec::with_capacity(n);
    let mut pos: Vec<Vec3> = Vec::with_capacity(n);
    for (j, joint) in skeleton.joints().iter().enumerate() {
        let local = quat_to_matrix(&rotations[j]);
        match joint.parent {
            None => {
                world_rot.push(local);
                pos.push(root_position);
            }
            Some(p) => {
                let offset = mat_vec(&world_rot[p], joint.offset);
                pos.push(add3(pos[p], offset));
                world_rot.push(mat_mul(&world_rot[p], &local));
            }
        }
    }
    pos
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn norm3(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Rotation about the vertical (Y) axis.
pub fn rot_y(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub fn rot_x(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

pub fn rot_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Decomposes `m = Rz(a) * Rx(b) * Ry(c)` into `(a, b, c)` radians, picking
/// the branch closest to `previous`. At gimbal lock the Z angle of
/// `previous` is kept.
pub fn matrix_to_euler_zxy(m: &Mat3, previous: Option<Vec3>) -> Vec3 {
    let sx = m[2][1].clamp(-1.0, 1.0);
    let x = sx.asin();
    let cx = x.cos();
    let raw = if cx > 1e-6 {
        let y = (-m[2][0]).atan2(m[2][2]);
        let z = (-m[0][1]).atan2(m[1][1]);
        [z, x, y]
    } else {
        let z = previous.map(|p| p[0]).unwrap_or(0.0);
        let phi = m[0][2].atan2(m[0][0]);
        let y = if sx > 0.0 { phi - z } else { phi + z };
        [z, x, y]
    };
    let Some(prev) = previous else {
        return raw;
    };
    // Two equivalent branches: (z, x, y) and (z + pi, pi - x, y + pi).
    let alt = [
        raw[0] + std::f64::consts::PI,
        std::f64::consts::PI - raw[1],
        raw[2] + std::f64::consts::PI,
    ];
    let a = unwrap_towards(raw, prev);
    let b = unwrap_towards(alt, prev);
    let dist = |v: Vec3| (0..3).map(|i| (v[i] - prev[i]).powi(2)).sum::<f64>();
    if dist(b) + 1e-12 < dist(a) {
        b
    } else {
        a
    }
}

fn unwrap_towards(v: Vec3, reference: Vec3) -> Vec3 {
    let tau = std::f64::consts::TAU;
    let mut out = v;
    for i in 0..3 {
        out[i] -= tau * ((out[i] - reference[i]) / tau).round();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mocap::{Joint, Skeleton};
    use std::f64::consts::{FRAC_PI_2, PI};

    fn close(a: Vec3, b: Vec3, tol: f64) -> bool {
        (0..3).all(|i| (a[i] - b[i]).abs() < tol)
    }

    #[test]
    fn normalize_examples() {
        let q = quat_normalize(Quaternion::new(2.0, 0.0, 0.0, 0.0), 0).unwrap();
        assert_eq!(q, Quaternion::IDENTITY);
        let q = quat_normalize(Quaternion::new(0.0, 3.0, 4.0, 0.0), 0).unwrap();
        assert!((q.x - 0.6).abs() < 1e-15 && (q.y - 0.8).abs() < 1e-15);
        let err = quat_normalize(Quaternion::new(1e-12, 0.0, 0.0, 0.0), 7).unwrap_err();
        assert!(matches!(err, DfnError::DegenerateQuaternion { joint: 7, .. }));
    }

    #[test]
    fn rotate_examples() {
        let v = [0.3, -2.0, 5.0];
        assert_eq!(quat_rotate(&Quaternion::IDENTITY, v), v);
        let qz = Quaternion::from_axis_angle([0.0, 0.0, 1.0], FRAC_PI_2);
        assert!(close(quat_rotate(&qz, [1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], 1e-7));
        let qy = Quaternion::from_axis_angle([0.0, 1.0, 0.0], PI);
        assert!(close(quat_rotate(&qy, [1.0, 0.0, 1.0]), [-1.0, 0.0, -1.0], 1e-7));
    }

    #[test]
    fn composition_matches_sequential_rotation() {
        let q1 = Quaternion::from_axis_angle([1.0, 2.0, 0.5], 0.7);
        let q2 = Quaternion::from_axis_angle([-0.3, 0.1, 1.0], -1.9);
        let v = [0.4, -1.2, 2.2];
        let a = quat_rotate(&q1.mul(&q2), v);
        let b = quat_rotate(&q1, quat_rotate(&q2, v));
        assert!(close(a, b, 1e-12));
    }

    #[test]
    fn matrix_quat_round_trip() {
        for (axis, angle) in [([1.0, 0.0, 0.0], 3.0), ([0.2, -1.0, 0.4], 1.1), ([0.0, 0.0, 1.0], -2.9)] {
            let q = Quaternion::from_axis_angle(axis, angle);
            let back = matrix_to_quat(&quat_to_matrix(&q));
            assert!(q.same_rotation(&back, 1e-12));
        }
    }

    #[test]
    fn euler_zxy_recovers_rotation() {
        let angles = [0.4, -0.3, 1.2];
        let m = mat_mul(&mat_mul(&rot_z(angles[0]), &rot_x(angles[1])), &rot_y(angles[2]));
        let e = matrix_to_euler_zxy(&m, None);
        assert!(close(e, angles, 1e-12));
        // gimbal lock keeps previous z and still reproduces the matrix
        let m = mat_mul(&mat_mul(&rot_z(0.3), &rot_x(FRAC_PI_2)), &rot_y(0.5));
        let e = matrix_to_euler_zxy(&m, Some([0.3, 1.5, 0.4]));
        let back = mat_mul(&mat_mul(&rot_z(e[0]), &rot_x(e[1])), &rot_y(e[2]));
        for i in 0..3 {
            assert!(close(back[i], m[i], 1e-9));
        }
    }

    #[test]
    fn fk_two_joint_chain() {
        let skel = Skeleton::new(vec![
            Joint::new("root", None, [0.0, 0.0, 0.0]),
            Joint::new("child", Some(0), [0.0, 10.0, 0.0]),
        ])
        .unwrap();
        let rest = forward_kinematics(&skel, &[Quaternion::IDENTITY; 2]);
        assert_eq!(rest, vec![0.0, 0.0, 0.0, 0.0, 10.0, 0.0]);
        let qz = Quaternion::from_axis_angle([0.0, 0.0, 1.0], FRAC_PI_2);
        let p = forward_kinematics(&skel, &[qz, Quaternion::IDENTITY]);
        assert!(close([p[3], p[4], p[5]], [-10.0, 0.0, 0.0], 1e-7));
    }
}
