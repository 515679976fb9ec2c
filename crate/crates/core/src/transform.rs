use serde::{Deserialize, Serialize};

use crate::geometry::{Mat3, Point3, Vec3};
use crate::scalar::Real;

/// A proper rigid motion `p ↦ R·p + t`.
///
/// Serialized as a unit quaternion `(w, x, y, z)` plus translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "PoseRepr<T>", from = "PoseRepr<T>", bound = "T: Real")]
pub struct RigidTransform<T> {
    rotation: Mat3<T>,
    translation: Vec3<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct PoseRepr<T> {
    quaternion: [T; 4],
    translation: [T; 3],
}

impl<T: Real> From<RigidTransform<T>> for PoseRepr<T> {
    fn from(t: RigidTransform<T>) -> Self {
        Self {
            quaternion: t.quaternion(),
            translation: t.translation.to_array(),
        }
    }
}

impl<T: Real> From<PoseRepr<T>> for RigidTransform<T> {
    fn from(r: PoseRepr<T>) -> Self {
        RigidTransform::from_quaternion(r.quaternion, Vec3::from_array(r.translation))
    }
}

impl<T: Real> Default for RigidTransform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> RigidTransform<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zero(),
        }
    }

    /// Builds a transform from a rotation that the caller guarantees to be
    /// orthonormal with determinant +1. Use [`RigidTransform::try_new`] for
    /// untrusted input.
    pub fn from_parts(rotation: Mat3<T>, translation: Vec3<T>) -> Self {
        Self { rotation, translation }
    }

    /// Validates orthonormality and handedness to within `tol` per entry.
    pub fn try_new(rotation: Mat3<T>, translation: Vec3<T>, tol: T) -> Option<Self> {
        let rtr = rotation.transpose().mul_mat(&rotation);
        if rtr.max_abs_diff(&Mat3::identity()) > tol || (rotation.determinant() - T::one()).abs() > tol {
            return None;
        }
        if !translation.is_finite() {
            return None;
        }
        Some(Self { rotation, translation })
    }

    pub fn from_translation(t: Vec3<T>) -> Self {
        Self::from_parts(Mat3::identity(), t)
    }

    pub fn from_axis_angle(axis: Vec3<T>, angle: T, translation: Vec3<T>) -> Self {
        Self::from_parts(Mat3::from_axis_angle(axis, angle), translation)
    }

    /// Unit quaternion `(w, x, y, z)`; normalized on input.
    pub fn from_quaternion(q: [T; 4], translation: Vec3<T>) -> Self {
        let n = q.iter().map(|c| *c * *c).sum::<T>().sqrt();
        let [w, x, y, z] = q.map(|c| c / n);
        let two = T::lit(2.0);
        let one = T::one();
        let r = Mat3::from_rows([
            [one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
            [two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x)],
            [two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y)],
        ]);
        Self::from_parts(r, translation)
    }

    /// Rotation as a unit quaternion `(w, x, y, z)` with `w ≥ 0`.
    pub fn quaternion(&self) -> [T; 4] {
        let m = &self.rotation.m;
        let one = T::one();
        let quarter = T::lit(0.25);
        let tr = m[0][0] + m[1][1] + m[2][2];
        let q = if tr > T::zero() {
            let s = (tr + one).sqrt() * T::lit(2.0);
            [quarter * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s]
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (one + m[0][0] - m[1][1] - m[2][2]).sqrt() * T::lit(2.0);
            [(m[2][1] - m[1][2]) / s, quarter * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s]
        } else if m[1][1] > m[2][2] {
            let s = (one + m[1][1] - m[0][0] - m[2][2]).sqrt() * T::lit(2.0);
            [(m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, quarter * s, (m[1][2] + m[2][1]) / s]
        } else {
            let s = (one + m[2][2] - m[0][0] - m[1][1]).sqrt() * T::lit(2.0);
            [(m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, quarter * s]
        };
        let n = q.iter().map(|c| *c * *c).sum::<T>().sqrt();
        let sign = if q[0] < T::zero() { -T::one() } else { T::one() };
        q.map(|c| sign * c / n)
    }

    pub fn rotation(&self) -> &Mat3<T> {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3<T> {
        self.translation
    }

    #[inline]
    pub fn apply_point(&self, p: Point3<T>) -> Point3<T> {
        self.rotation.mul_vec(p) + self.translation
    }

    #[inline]
    pub fn apply_vector(&self, v: Vec3<T>) -> Vec3<T> {
        self.rotation.mul_vec(v)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation.mul_mat(&other.rotation),
            translation: self.rotation.mul_vec(other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -rt.mul_vec(self.translation),
        }
    }

    /// Geodesic rotation distance to `other`, radians.
    pub fn rotation_error(&self, other: &Self) -> T {
        self.rotation.transpose().mul_mat(&other.rotation).rotation_angle()
    }

    pub fn translation_error(&self, other: &Self) -> T {
        self.translation.distance(other.translation)
    }

    /// Largest deviation of `RᵀR` from identity and of `det R` from 1.
    pub fn orthonormality_error(&self) -> T {
        let rtr = self.rotation.transpose().mul_mat(&self.rotation);
        rtr.max_abs_diff(&Mat3::identity())
            .max((self.rotation.determinant() - T::one()).abs())
    }

    pub fn cast<U: Real>(&self) -> RigidTransform<U> {
        let m = self.rotation.m.map(|r| r.map(|v| U::lit(v.to_f64_lossy())));
        RigidTransform::from_parts(Mat3::from_rows(m), self.translation.cast())
    }
}
