//! Quaternions, the thrust/yaw decomposition of the body rotation and the
//! yaw-only frame f used to express observations.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::GRAVITY;

/// Unit quaternion components `(w, x, y, z)`, Hamilton convention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Self = Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let a = axis.normalize() * (0.5 * angle).sin();
        Self::new((0.5 * angle).cos(), a.x, a.y, a.z)
    }

    /// Rotation about world z by `psi`.
    pub fn yaw(psi: f64) -> Self {
        Self::new((0.5 * psi).cos(), 0.0, 0.0, (0.5 * psi).sin())
    }

    pub fn conj(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        let Self { w, x, y, z } = *self;
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
}

/// Hamilton product `a ∘ b`.
pub fn quat_mul(a: Quaternion, b: Quaternion) -> Quaternion {
    Quaternion {
        w: a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        x: a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        y: a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        z: a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;

    fn mul(self, rhs: Self) -> Self {
        quat_mul(self, rhs)
    }
}

/// `ξ = a + g e_z`.
pub fn xi_from_acceleration(a: Vector3<f64>) -> Vector3<f64> {
    a + Vector3::new(0.0, 0.0, GRAVITY)
}

fn unit_xi(xi: Vector3<f64>) -> Result<Vector3<f64>> {
    let n = xi.norm();
    if !(n > 1e-12) || !n.is_finite() {
        return Err(Error::ZeroXi);
    }
    let xb = xi / n;
    if xb.z <= -1.0 + 1e-9 {
        return Err(Error::SingularThrust);
    }
    Ok(xb)
}

/// The quaternion `q_ξ` that tilts `e_z` onto `ξ̄` with no rotation about it.
pub fn thrust_quaternion(xi: Vector3<f64>) -> Result<Quaternion> {
    let xb = unit_xi(xi)?;
    let s = 1.0 / (2.0 * (1.0 + xb.z)).sqrt();
    Ok(Quaternion::new((1.0 + xb.z) * s, -xb.y * s, xb.x * s, 0.0))
}

/// Closed-form rotation matrix of [`thrust_quaternion`].
pub fn thrust_rotation(xi: Vector3<f64>) -> Result<Matrix3<f64>> {
    let xb = unit_xi(xi)?;
    Ok(thrust_rotation_unit(xb))
}

/// `xb` must be a unit vector away from `-e_z`.
pub(crate) fn thrust_rotation_unit(xb: Vector3<f64>) -> Matrix3<f64> {
    let (x, y, z) = (xb.x, xb.y, xb.z);
    let s = 1.0 + z;
    Matrix3::new(
        1.0 - x * x / s,
        -x * y / s,
        x,
        -x * y / s,
        1.0 - y * y / s,
        y,
        -x,
        -y,
        z,
    )
}

/// World-from-body rotation `R(q_ξ ∘ q_ψ)`; its columns are `(b1, b2, b3)`
/// with `b3 = ξ̄`.
pub fn rotation_from_xi_psi(xi: Vector3<f64>, psi: f64) -> Result<Matrix3<f64>> {
    let q = thrust_quaternion(xi)? * Quaternion::yaw(psi);
    Ok(q.to_rotation_matrix())
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// The yaw `ψ ∈ (-π, π]` whose body x-axis is `b1` for thrust direction `ξ`.
pub fn psi_from_b1(xi: Vector3<f64>, b1: Vector3<f64>) -> Result<f64> {
    let xb = unit_xi(xi)?;
    if (b1.norm() - 1.0).abs() > 1e-6 || b1.dot(&xb).abs() >= 1e-6 {
        return Err(Error::NotPerpendicular);
    }
    Ok(psi_from_b1_unchecked(xb, b1))
}

pub(crate) fn psi_from_b1_unchecked(xb: Vector3<f64>, b1: Vector3<f64>) -> f64 {
    // b1 = R_ξ (cos ψ, sin ψ, 0)ᵀ, so the first two columns of R_ξ give ψ.
    let (x, y, z) = (xb.x, xb.y, xb.z);
    let s = 1.0 + z;
    let c0 = Vector3::new(1.0 - x * x / s, -x * y / s, -x);
    let c1 = Vector3::new(-x * y / s, 1.0 - y * y / s, -y);
    let psi = c1.dot(&b1).atan2(c0.dot(&b1));
    if psi <= -PI {
        PI
    } else {
        psi
    }
}

/// UAV state in the world frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UavState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub a: Vector3<f64>,
    pub psi: f64,
    pub psi_dot: f64,
}

impl UavState {
    pub fn at_rest(p: Vector3<f64>, psi: f64) -> Self {
        Self { p, v: Vector3::zeros(), a: Vector3::zeros(), psi, psi_dot: 0.0 }
    }

    pub fn xi(&self) -> Vector3<f64> {
        xi_from_acceleration(self.a)
    }

    pub fn frame_f(&self) -> FrameF {
        FrameF::new(self.p, self.psi)
    }
}

/// Frame with origin `origin`, z parallel to world z and yaw `psi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameF {
    pub origin: Vector3<f64>,
    pub psi: f64,
}

impl FrameF {
    pub fn new(origin: Vector3<f64>, psi: f64) -> Self {
        Self { origin, psi }
    }

    fn rot(&self) -> Matrix3<f64> {
        let (s, c) = self.psi.sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    pub fn vector_to_f(&self, v: Vector3<f64>) -> Vector3<f64> {
        self.rot().transpose() * v
    }

    pub fn point_to_f(&self, x: Vector3<f64>) -> Vector3<f64> {
        self.vector_to_f(x - self.origin)
    }

    pub fn vector_to_world(&self, v: Vector3<f64>) -> Vector3<f64> {
        self.rot() * v
    }

    pub fn point_to_world(&self, x: Vector3<f64>) -> Vector3<f64> {
        self.vector_to_world(x) + self.origin
    }
}

/// Expresses `x` in the frame f of `state` (a point if `is_point`, else a
/// free vector).
pub fn world_to_f(state: &UavState, x: Vector3<f64>, is_point: bool) -> Vector3<f64> {
    let f = state.frame_f();
    if is_point {
        f.point_to_f(x)
    } else {
        f.vector_to_f(x)
    }
}

/// Inverse of [`world_to_f`].
pub fn f_to_world(state: &UavState, x: Vector3<f64>, is_point: bool) -> Vector3<f64> {
    let f = state.frame_f();
    if is_point {
        f.point_to_world(x)
    } else {
        f.vector_to_world(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) -> bool {
        (a - b).abs().max() < tol
    }

    fn rz(a: f64) -> Matrix3<f64> {
        let (s, c) = a.sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn identity_is_neutral() {
        let q = Quaternion::from_axis_angle(Vector3::new(1.0, 2.0, -0.5), 0.8);
        let r = Quaternion::IDENTITY * q;
        assert!((r.w - q.w).abs() < 1e-15 && (r.z - q.z).abs() < 1e-15);
    }

    #[test]
    fn conjugate_inverts_unit_quaternion() {
        let q = Quaternion::from_axis_angle(Vector3::new(0.3, -1.0, 0.2), 2.1);
        let r = q * q.conj();
        assert!((r.w - 1.0).abs() < 1e-14);
        assert!(r.x.abs() < 1e-14 && r.y.abs() < 1e-14 && r.z.abs() < 1e-14);
    }

    #[test]
    fn z_rotations_compose() {
        let (a, b) = (0.7, -1.9);
        let r = (Quaternion::yaw(a) * Quaternion::yaw(b)).to_rotation_matrix();
        assert!(close(&r, &rz(a + b), 1e-14));
        assert!(close(&r, &(rz(a) * rz(b)), 1e-14));
    }

    #[test]
    fn hover_thrust_gives_identity_and_yaw() {
        let xi = Vector3::new(0.0, 0.0, GRAVITY);
        assert!(close(&rotation_from_xi_psi(xi, 0.0).unwrap(), &Matrix3::identity(), 1e-15));
        assert!(close(&rotation_from_xi_psi(xi, PI / 2.0).unwrap(), &rz(PI / 2.0), 1e-15));
    }

    #[test]
    fn antiparallel_thrust_is_singular() {
        let xi = Vector3::new(0.0, 0.0, -3.0);
        assert!(matches!(rotation_from_xi_psi(xi, 0.0), Err(Error::SingularThrust)));
        assert!(matches!(rotation_from_xi_psi(Vector3::zeros(), 0.0), Err(Error::ZeroXi)));
    }

    #[test]
    fn closed_form_thrust_rotation_matches_quaternion() {
        for xi in [
            Vector3::new(1.0, 2.0, 9.0),
            Vector3::new(-4.0, 0.5, 1.0),
            Vector3::new(0.2, -0.1, -0.5),
        ] {
            let a = thrust_quaternion(xi).unwrap().to_rotation_matrix();
            let b = thrust_rotation(xi).unwrap();
            assert!(close(&a, &b, 1e-12));
        }
    }

    #[test]
    fn psi_from_b1_axes() {
        let xi = Vector3::new(0.0, 0.0, GRAVITY);
        assert!(psi_from_b1(xi, Vector3::x()).unwrap().abs() < 1e-15);
        assert!((psi_from_b1(xi, Vector3::y()).unwrap() - PI / 2.0).abs() < 1e-15);
        assert!((psi_from_b1(xi, -Vector3::x()).unwrap() - PI).abs() < 1e-15);
        assert!(matches!(psi_from_b1(xi, Vector3::z()), Err(Error::NotPerpendicular)));
    }

    #[test]
    fn frame_f_identity_and_origin() {
        let s = UavState::at_rest(Vector3::zeros(), 0.0);
        let x = Vector3::new(1.0, -2.0, 3.0);
        assert_eq!(world_to_f(&s, x, true), x);
        assert_eq!(world_to_f(&s, x, false), x);
        let s = UavState::at_rest(Vector3::new(4.0, 5.0, 6.0), 1.2);
        assert!(world_to_f(&s, s.p, true).norm() < 1e-15);
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.5) - 0.5).abs() < 1e-15);
    }
}
