//! Quaternion and unit dual quaternion algebra.
//!
//! Every frame, target and pose error in the crate is a [`DualQuaternion`].
//! Coefficients are always ordered `(w, x, y, z)`; the vectorized form
//! [`Vec8`] stores the primary part first and the dual part second. Angles
//! are radians and translations are meters.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{SMatrix, Vector3};
use serde::{Deserialize, Serialize};

/// Tolerance on `‖r‖ - 1` accepted by [`DualQuaternion::from_rt`].
pub const ROTATION_UNIT_TOL: f64 = 1e-9;
/// Tolerance on the unit-pose conditions accepted by [`DualQuaternion::decompose`].
pub const POSE_UNIT_TOL: f64 = 1e-9;

pub type Mat8 = SMatrix<f64, 8, 8>;
pub type Mat4 = SMatrix<f64, 4, 4>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PoseError {
    #[error("rotation quaternion is not unit (norm {0})")]
    NonUnitRotation(f64),
    #[error("dual quaternion is not a unit pose (primary norm {norm}, <primary, dual> = {dot})")]
    NonUnitPose { norm: f64, dot: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const ZERO: Quaternion = Quaternion::new(0.0, 0.0, 0.0, 0.0);
    pub const ONE: Quaternion = Quaternion::new(1.0, 0.0, 0.0, 0.0);

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    /// Pure quaternion `(0, v)`.
    pub fn pure(v: &Vector3<f64>) -> Self {
        Self::new(0.0, v.x, v.y, v.z)
    }

    /// Rotation of `angle` radians about `axis`. The axis is normalized here.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, s * axis.x / n, s * axis.y / n, s * axis.z / n)
    }

    pub fn rot_x(angle: f64) -> Self {
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, s, 0.0, 0.0)
    }

    pub fn rot_y(angle: f64) -> Self {
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, 0.0, s, 0.0)
    }

    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, 0.0, 0.0, s)
    }

    /// Fixed-axis roll/pitch/yaw: `Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub fn from_rpy(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self::rot_z(yaw) * Self::rot_y(pitch) * Self::rot_x(roll)
    }

    pub fn conj(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn norm_squared(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    /// Four-dimensional Euclidean inner product.
    pub fn normalized(&self) -> Self {
        self.scale(1.0 / self.norm())
    }

    pub fn dot(&self, o: &Self) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Rotates `v` by this (assumed unit) quaternion: `r v r*`.
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        (*self * Self::pure(v) * self.conj()).vector()
    }

    /// Left Hamilton operator: `a * b == hplus4(a) * vec4(b)`.
    pub fn hplus4(&self) -> Mat4 {
        let Quaternion { w, x, y, z } = *self;
        Mat4::new(
            w, -x, -y, -z, //
            x, w, -z, y, //
            y, z, w, -x, //
            z, -y, x, w,
        )
    }

    /// Right Hamilton operator: `a * b == hminus4(b) * vec4(a)`.
    pub fn hminus4(&self) -> Mat4 {
        let Quaternion { w, x, y, z } = *self;
        Mat4::new(
            w, -x, -y, -z, //
            x, w, z, -y, //
            y, -z, w, x, //
            z, y, -x, w,
        )
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;

    fn mul(self, b: Quaternion) -> Quaternion {
        let a = self;
        Quaternion::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }
}

impl Add for Quaternion {
    type Output = Quaternion;

    fn add(self, b: Quaternion) -> Quaternion {
        Quaternion::new(self.w + b.w, self.x + b.x, self.y + b.y, self.z + b.z)
    }
}

impl Sub for Quaternion {
    type Output = Quaternion;

    fn sub(self, b: Quaternion) -> Quaternion {
        Quaternion::new(self.w - b.w, self.x - b.x, self.y - b.y, self.z - b.z)
    }
}

impl Neg for Quaternion {
    type Output = Quaternion;

    fn neg(self) -> Quaternion {
        self.scale(-1.0)
    }
}

/// Eight coefficients of a dual quaternion: primary `(w,x,y,z)` then dual `(w,x,y,z)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec8(pub [f64; 8]);

impl Vec8 {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_vector(&self) -> nalgebra::SVector<f64, 8> {
        nalgebra::SVector::<f64, 8>::from_column_slice(&self.0)
    }
}

/// `primary + ε dual`. Unit dual quaternions represent rigid poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualQuaternion {
    pub primary: Quaternion,
    pub dual: Quaternion,
}

impl Default for DualQuaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl DualQuaternion {
    pub const IDENTITY: DualQuaternion = DualQuaternion {
        primary: Quaternion::ONE,
        dual: Quaternion::ZERO,
    };

    pub const fn new(primary: Quaternion, dual: Quaternion) -> Self {
        Self { primary, dual }
    }

    /// Pose with rotation `r` followed by translation `t` (meters), i.e.
    /// `primary = r`, `dual = ½ t r`.
    pub fn from_rt(r: Quaternion, t: &Vector3<f64>) -> Result<Self, PoseError> {
        let n = r.norm();
        if !((n - 1.0).abs() <= ROTATION_UNIT_TOL) {
            return Err(PoseError::NonUnitRotation(n));
        }
        Ok(Self::from_rt_unchecked(r, t))
    }

    pub(crate) fn from_rt_unchecked(r: Quaternion, t: &Vector3<f64>) -> Self {
        Self::new(r, (Quaternion::pure(t) * r).scale(0.5))
    }

    pub fn from_rotation(r: Quaternion) -> Self {
        Self::new(r, Quaternion::ZERO)
    }

    pub fn from_translation(t: &Vector3<f64>) -> Self {
        Self::new(Quaternion::ONE, Quaternion::pure(t).scale(0.5))
    }

    /// Splits a unit pose into its rotation and translation.
    pub fn decompose(&self) -> Result<(Quaternion, Vector3<f64>), PoseError> {
        self.check_unit(POSE_UNIT_TOL)?;
        Ok((self.primary, self.translation()))
    }

    /// `2 · dual · conj(primary)`, vector part. Meaningful for unit poses.
    pub fn translation(&self) -> Vector3<f64> {
        (self.dual * self.primary.conj()).scale(2.0).vector()
    }

    pub fn rotation(&self) -> Quaternion {
        self.primary
    }

    pub fn conj(&self) -> Self {
        Self::new(self.primary.conj(), self.dual.conj())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.primary.scale(s), self.dual.scale(s))
    }

    /// Applies the pose to a point: `R p + t`.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.primary.rotate(p) + self.translation()
    }

    pub fn is_unit(&self, tol: f64) -> bool {
        self.check_unit(tol).is_ok()
    }

    pub fn check_unit(&self, tol: f64) -> Result<(), PoseError> {
        let norm = self.primary.norm();
        let dot = self.primary.dot(&self.dual);
        if (norm - 1.0).abs() <= tol && dot.abs() <= tol {
            Ok(())
        } else {
            Err(PoseError::NonUnitPose { norm, dot })
        }
    }

    /// Projects onto the unit pose manifold. Never called implicitly.
    pub fn normalize(&self) -> Self {
        let n = self.primary.norm();
        let p = self.primary.scale(1.0 / n);
        let d = self.dual.scale(1.0 / n);
        Self::new(p, d - p.scale(p.dot(&d)))
    }

    pub fn vec8(&self) -> Vec8 {
        let p = self.primary;
        let d = self.dual;
        Vec8([p.w, p.x, p.y, p.z, d.w, d.x, d.y, d.z])
    }

    pub fn from_vec8(v: &Vec8) -> Self {
        let a = v.0;
        Self::new(
            Quaternion::new(a[0], a[1], a[2], a[3]),
            Quaternion::new(a[4], a[5], a[6], a[7]),
        )
    }

    /// Left Hamilton operator: `vec8(a * b) == a.hplus8() * vec8(b)`.
    pub fn hplus8(&self) -> Mat8 {
        let mut m = Mat8::zeros();
        let p = self.primary.hplus4();
        let d = self.dual.hplus4();
        m.fixed_view_mut::<4, 4>(0, 0).copy_from(&p);
        m.fixed_view_mut::<4, 4>(4, 0).copy_from(&d);
        m.fixed_view_mut::<4, 4>(4, 4).copy_from(&p);
        m
    }

    /// Right Hamilton operator: `vec8(a * b) == b.hminus8() * vec8(a)`.
    pub fn hminus8(&self) -> Mat8 {
        let mut m = Mat8::zeros();
        let p = self.primary.hminus4();
        let d = self.dual.hminus4();
        m.fixed_view_mut::<4, 4>(0, 0).copy_from(&p);
        m.fixed_view_mut::<4, 4>(4, 0).copy_from(&d);
        m.fixed_view_mut::<4, 4>(4, 4).copy_from(&p);
        m
    }
}

impl Mul for DualQuaternion {
    type Output = DualQuaternion;

    fn mul(self, b: DualQuaternion) -> DualQuaternion {
        DualQuaternion::new(
            self.primary * b.primary,
            self.primary * b.dual + self.dual * b.primary,
        )
    }
}

impl Add for DualQuaternion {
    type Output = DualQuaternion;

    fn add(self, b: DualQuaternion) -> DualQuaternion {
        DualQuaternion::new(self.primary + b.primary, self.dual + b.dual)
    }
}

impl Sub for DualQuaternion {
    type Output = DualQuaternion;

    fn sub(self, b: DualQuaternion) -> DualQuaternion {
        DualQuaternion::new(self.primary - b.primary, self.dual - b.dual)
    }
}

impl Neg for DualQuaternion {
    type Output = DualQuaternion;

    fn neg(self) -> DualQuaternion {
        self.scale(-1.0)
    }
}

impl From<DualQuaternion> for Vec8 {
    fn from(p: DualQuaternion) -> Vec8 {
        p.vec8()
    }
}

impl From<Vec8> for DualQuaternion {
    fn from(v: Vec8) -> DualQuaternion {
        DualQuaternion::from_vec8(&v)
    }
}

/// Product of two dual quaternions.
pub fn dq_mul(a: &DualQuaternion, b: &DualQuaternion) -> DualQuaternion {
    *a * *b
}

pub fn dq_conj(a: &DualQuaternion) -> DualQuaternion {
    a.conj()
}

/// Skew-symmetric cross-product matrix `[v]×`.
pub fn skew(v: &Vector3<f64>) -> nalgebra::Matrix3<f64> {
    nalgebra::Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}
