//! Rigid-body transforms, Euler views and point clouds.
//!
//! Rotations are stored as 3×3 matrices. Euler angles follow the vehicle
//! convention used throughout the crate: x forward, y left, z up, and
//! `R = Rz(yaw) · Ry(pitch) · Rx(roll)`.

use std::ops::Mul;

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::scalar::Real;

/// Distance from gimbal lock (in radians of pitch) below which
/// [`transform_to_euler`] refuses to decompose.
pub const GIMBAL_MARGIN: f64 = 1e-6;

/// Points sampled by one sensor, expressed in that sensor's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T: Real> {
    pub frame_id: String,
    points: Vec<Point3<T>>,
}

impl<T: Real> PointCloud<T> {
    /// Builds a cloud, rejecting non-finite coordinates.
    pub fn new(frame_id: impl Into<String>, points: Vec<Point3<T>>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite_value())) {
            return Err(CalibError::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { frame_id: frame_id.into(), points })
    }

    pub(crate) fn from_trusted(frame_id: impl Into<String>, points: Vec<Point3<T>>) -> Self {
        Self { frame_id: frame_id.into(), points }
    }

    pub fn points(&self) -> &[Point3<T>] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3<T>> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keeps the points whose index satisfies `keep`.
    pub fn select(&self, mut keep: impl FnMut(usize, &Point3<T>) -> bool) -> Self {
        let points = self.points.iter().enumerate().filter(|(i, p)| keep(*i, p)).map(|(_, p)| *p).collect();
        Self::from_trusted(self.frame_id.clone(), points)
    }

    pub fn transformed(&self, t: &RigidTransform<T>) -> Self {
        apply(t, self)
    }
}

/// Proper rigid motion `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<T: Real> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Default for RigidTransform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> RigidTransform<T> {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Checked constructor: the rotation must be orthonormal with det +1.
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Result<Self> {
        let t = Self { rotation, translation };
        if !t.is_valid(T::tol(1e-9)) {
            return Err(CalibError::invalid("rotation is not a proper orthonormal matrix"));
        }
        Ok(t)
    }

    pub fn from_rotation(rotation: Matrix3<T>) -> Self {
        Self { rotation, translation: Vector3::zeros() }
    }

    pub fn from_translation(translation: Vector3<T>) -> Self {
        Self { rotation: Matrix3::identity(), translation }
    }

    pub fn is_valid(&self, tol: T) -> bool {
        let finite = self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite_value());
        if !finite {
            return false;
        }
        let gram = self.rotation * self.rotation.transpose() - Matrix3::identity();
        gram.iter().all(|v| v.abs() <= tol) && (self.rotation.determinant() - T::one()).abs() <= tol
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self { rotation: self.rotation * other.rotation, translation: self.rotation * other.translation + self.translation }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    #[inline]
    pub fn transform_point(&self, p: &Point3<T>) -> Point3<T> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    #[inline]
    pub fn transform_vector(&self, v: &Vector3<T>) -> Vector3<T> {
        self.rotation * v
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> T {
        let c = (self.rotation.trace() - T::one()) / T::lit(2.0);
        c.clamp(-T::one(), T::one()).acos()
    }

    /// Re-orthonormalises the rotation (polar projection via SVD).
    pub fn orthonormalized(&self) -> Self {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < T::zero() {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * vt;
        }
        Self { rotation: r, translation: self.translation }
    }

    pub fn cast_f64(&self) -> RigidTransform<f64> {
        RigidTransform { rotation: self.rotation.map(|v| v.as_f64()), translation: self.translation.map(|v| v.as_f64()) }
    }
}

impl<T: Real> Mul for RigidTransform<T> {
    type Output = RigidTransform<T>;

    fn mul(self, rhs: Self) -> Self::Output {
        self.compose(&rhs)
    }
}

impl<'a, T: Real> Mul<&'a RigidTransform<T>> for &'a RigidTransform<T> {
    type Output = RigidTransform<T>;

    fn mul(self, rhs: &'a RigidTransform<T>) -> Self::Output {
        self.compose(rhs)
    }
}

/// Pose as (pitch, roll, yaw) in radians and (x, y, z) in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerPose<T: Real> {
    pub pitch: T,
    pub roll: T,
    pub yaw: T,
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> EulerPose<T> {
    pub fn new(pitch: T, roll: T, yaw: T, x: T, y: T, z: T) -> Self {
        Self { pitch, roll, yaw, x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero(), T::zero(), T::zero(), T::zero())
    }

    /// Components in reporting order: pitch, roll, yaw, x, y, z.
    pub fn as_array(&self) -> [T; 6] {
        [self.pitch, self.roll, self.yaw, self.x, self.y, self.z]
    }

    pub fn from_array(a: [T; 6]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite_value())
    }
}

#[rustfmt::skip]
pub fn rot_x<T: Real>(a: T) -> Matrix3<T> {
    let (s, c) = a.sin_cos();
    Matrix3::new(
        T::one(), T::zero(), T::zero(),
        T::zero(), c, -s,
        T::zero(), s, c,
    )
}

#[rustfmt::skip]
pub fn rot_y<T: Real>(a: T) -> Matrix3<T> {
    let (s, c) = a.sin_cos();
    Matrix3::new(
        c, T::zero(), s,
        T::zero(), T::one(), T::zero(),
        -s, T::zero(), c,
    )
}

#[rustfmt::skip]
pub fn rot_z<T: Real>(a: T) -> Matrix3<T> {
    let (s, c) = a.sin_cos();
    Matrix3::new(
        c, -s, T::zero(),
        s, c, T::zero(),
        T::zero(), T::zero(), T::one(),
    )
}

#[inline]
#[rustfmt::skip]
fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(
        T::zero(), -v.z, v.y,
        v.z, T::zero(), -v.x,
        -v.y, v.x, T::zero(),
    )
}

/// Rotation by `angle` about the unit vector `axis`.
pub fn rodrigues<T: Real>(axis: &Vector3<T>, angle: T) -> Result<RigidTransform<T>> {
    if !axis.iter().all(|v| v.is_finite_value()) || !angle.is_finite_value() {
        return Err(CalibError::invalid("rotation axis and angle must be finite"));
    }
    if (axis.norm() - T::one()).abs() > T::tol(1e-9) {
        return Err(CalibError::invalid(format!("rotation axis must be unit length, got norm {}", axis.norm())));
    }
    Ok(RigidTransform::from_rotation(rodrigues_matrix(axis, angle)))
}

pub(crate) fn rodrigues_matrix<T: Real>(axis: &Vector3<T>, angle: T) -> Matrix3<T> {
    let k = skew(axis);
    let (s, c) = angle.sin_cos();
    Matrix3::identity() + k * s + k * k * (T::one() - c)
}

/// Exponential map of a rotation vector (axis × angle).
pub fn exp_so3<T: Real>(omega: &Vector3<T>) -> Matrix3<T> {
    let theta = omega.norm();
    if theta <= T::default_epsilon() {
        return Matrix3::identity() + skew(omega);
    }
    rodrigues_matrix(&(omega / theta), theta)
}

pub fn euler_to_transform<T: Real>(pose: &EulerPose<T>) -> RigidTransform<T> {
    RigidTransform { rotation: rot_z(pose.yaw) * rot_y(pose.pitch) * rot_x(pose.roll), translation: Vector3::new(pose.x, pose.y, pose.z) }
}

/// (pitch, roll, yaw) of `r`; at gimbal lock the roll/yaw split is arbitrary.
pub fn euler_angles<T: Real>(r: &Matrix3<T>) -> (T, T, T) {
    let cos_pitch = (r[(0, 0)] * r[(0, 0)] + r[(1, 0)] * r[(1, 0)]).sqrt();
    let pitch = (-r[(2, 0)]).atan2(cos_pitch);
    (pitch, r[(2, 1)].atan2(r[(2, 2)]), r[(1, 0)].atan2(r[(0, 0)]))
}

/// Inverse of [`euler_to_transform`]; fails near gimbal lock.
pub fn transform_to_euler<T: Real>(t: &RigidTransform<T>) -> Result<EulerPose<T>> {
    let (pitch, roll, yaw) = euler_angles(&t.rotation);
    if T::frac_pi_2() - pitch.abs() < T::lit(GIMBAL_MARGIN) {
        return Err(CalibError::DegenerateDecomposition { margin: GIMBAL_MARGIN });
    }
    Ok(EulerPose { pitch, roll, yaw, x: t.translation.x, y: t.translation.y, z: t.translation.z })
}

/// Pointwise `R·p + t`; keeps order and frame label.
pub fn apply<T: Real>(t: &RigidTransform<T>, cloud: &PointCloud<T>) -> PointCloud<T> {
    PointCloud::from_trusted(cloud.frame_id.clone(), cloud.points.iter().map(|p| t.transform_point(p)).collect())
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle<T: Real>(a: T) -> T {
    let two_pi = T::two_pi();
    let mut w = a % two_pi;
    if w > T::pi() {
        w -= two_pi;
    } else if w <= -T::pi() {
        w += two_pi;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn max_abs_diff(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
        (a - b).iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Rotation matrix of the unit quaternion (w, x, y, z).
    #[rustfmt::skip]
    fn quat_matrix(w: f64, x: f64, y: f64, z: f64) -> Matrix3<f64> {
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
            2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
            2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y),
        )
    }

    #[test]
    fn rodrigues_zero_angle_is_identity() {
        let r = rodrigues(&Vector3::z(), 0.0).unwrap();
        assert_eq!(r.rotation, Matrix3::identity());
    }

    #[test]
    fn rodrigues_quarter_turn_about_z() {
        let r = rodrigues(&Vector3::z(), FRAC_PI_2).unwrap();
        let p = r.transform_point(&Point3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(p, Point3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn rodrigues_matches_quaternion() {
        let axis = Vector3::new(1.0, 2.0, 2.0) / 3.0;
        let angle: f64 = 0.7;
        let (s, c) = (angle / 2.0).sin_cos();
        let q = quat_matrix(c, s * axis.x, s * axis.y, s * axis.z);
        let r = rodrigues(&axis, angle).unwrap();
        assert!(max_abs_diff(&r.rotation, &q) <= 1e-9);
        assert!(r.is_valid(1e-9));
    }

    #[test]
    fn rodrigues_rejects_bad_axis() {
        assert!(matches!(rodrigues(&Vector3::new(1.0, 1.0, 0.0), 0.3), Err(CalibError::InvalidArgument(_))));
        assert!(rodrigues(&Vector3::new(f64::NAN, 0.0, 0.0), 0.3).is_err());
    }

    #[test]
    fn euler_zero_and_pure_yaw() {
        assert_eq!(euler_to_transform(&EulerPose::<f64>::zero()), RigidTransform::identity());
        let t = euler_to_transform(&EulerPose::new(0.0, 0.0, FRAC_PI_2, 0.0, 0.0, 0.0));
        assert_relative_eq!(t.transform_point(&Point3::new(1.0, 0.0, 0.0)), Point3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn euler_matches_sequential_application() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let pose = EulerPose::new(0.1, 0.2, 0.3, 1.0, 2.0, 3.0);
        let t = euler_to_transform(&pose);
        for _ in 0..100 {
            let p = Vector3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
            let seq = rot_z(0.3) * (rot_y(0.1) * (rot_x(0.2) * p)) + Vector3::new(1.0, 2.0, 3.0);
            let got = t.transform_point(&Point3::from(p));
            assert!((got.coords - seq).amax() <= 1e-9);
        }
    }

    #[test]
    fn euler_identity_and_gimbal_lock() {
        let e = transform_to_euler(&RigidTransform::<f64>::identity()).unwrap();
        assert_eq!(e.as_array(), [0.0; 6]);
        let locked = euler_to_transform(&EulerPose::new(FRAC_PI_2, 0.1, 0.2, 0.0, 0.0, 0.0));
        assert!(matches!(transform_to_euler(&locked), Err(CalibError::DegenerateDecomposition { .. })));
    }

    #[test]
    fn apply_identity_and_translation() {
        let cloud = PointCloud::new("top", vec![Point3::new(0.0, 0.0, 0.0), Point3::new(-1.5, 2.0, 0.25)]).unwrap();
        assert_eq!(apply(&RigidTransform::identity(), &cloud), cloud);
        let moved = apply(&RigidTransform::from_translation(Vector3::x()), &cloud);
        assert_eq!(moved.points()[0], Point3::new(1.0, 0.0, 0.0));
        assert_eq!(moved.frame_id, "top");
    }

    #[test]
    fn cloud_rejects_nan() {
        assert!(PointCloud::new("x", vec![Point3::new(0.0, f64::NAN, 0.0)]).is_err());
    }

    #[test]
    fn inverse_composes_to_identity() {
        let t = euler_to_transform(&EulerPose::new(0.4, -0.3, 2.0, 0.5, -1.0, 2.0));
        let id = t.compose(&t.inverse());
        assert!(max_abs_diff(&id.rotation, &Matrix3::identity()) <= 1e-9);
        assert!(id.translation.amax() <= 1e-9);
    }

    #[test]
    fn wrap_angle_range() {
        assert_relative_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(-0.5), -0.5);
        assert_relative_eq!(wrap_angle(2.0 * PI + 0.1), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn works_in_single_precision() {
        let t = euler_to_transform(&EulerPose::<f32>::new(0.1, 0.2, 0.3, 1.0, 2.0, 3.0));
        let e = transform_to_euler(&t).unwrap();
        assert!((e.yaw - 0.3).abs() < 1e-5);
        assert!(rodrigues(&Vector3::<f32>::z(), 0.5).is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pose() -> impl Strategy<Value = EulerPose<f64>> {
            let a = -FRAC_PI_2 + 1e-3..FRAC_PI_2 - 1e-3;
            (a, -PI..PI, -PI..PI, -5.0..5.0, -5.0..5.0, -5.0..5.0f64).prop_map(|(p, r, y, x, yy, z)| EulerPose::new(p, r, y, x, yy, z))
        }

        proptest! {
            #[test]
            fn euler_round_trip(p in pose()) {
                let back = transform_to_euler(&euler_to_transform(&p)).unwrap();
                for (a, b) in p.as_array().iter().zip(back.as_array()) {
                    prop_assert!((wrap_angle(a - b)).abs() <= 1e-9);
                }
            }

            #[test]
            fn apply_is_isometry(p in pose(), a in prop::array::uniform3(-20.0..20.0f64), b in prop::array::uniform3(-20.0..20.0f64)) {
                let t = euler_to_transform(&p);
                let (pa, pb) = (Point3::from(a), Point3::from(b));
                let d0 = (pa - pb).norm();
                let d1 = (t.transform_point(&pa) - t.transform_point(&pb)).norm();
                prop_assert!((d0 - d1).abs() <= 1e-9);
            }

            #[test]
            fn rodrigues_inverse_pair(v in prop::array::uniform3(-1.0..1.0f64), angle in -PI..PI) {
                let v = Vector3::from(v);
                prop_assume!(v.norm() > 1e-3);
                let axis = v.normalize();
                let r = rodrigues(&axis, angle).unwrap().compose(&rodrigues(&axis, -angle).unwrap());
                prop_assert!(max_abs_diff(&r.rotation, &Matrix3::identity()) <= 1e-9);
            }
        }
    }
}
