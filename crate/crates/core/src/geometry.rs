//! Rigid transforms.
//!
//! Convention used everywhere in this crate: a [`Pose`] named `a_to_b` maps the
//! coordinates of a point expressed in frame `a` into frame `b`, i.e.
//! `p_b = a_to_b.apply(&p_a)`. Equivalently it is the pose of frame `a`
//! expressed in frame `b`.

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("interpolation parameter {0} outside [0, 1]")]
    InterpolationParameter(f64),
    #[error("pose buffer must be 56 bytes, got {0}")]
    BufferLength(usize),
    #[error("non-finite pose component")]
    NonFinite,
}

/// Rotation (unit quaternion, `w >= 0`) followed by a translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vec3,
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    // renormalize only once drift is measurable, so exact products stay exact
    let raw = q.into_inner();
    let q = if (raw.norm_squared() - 1.0).abs() > 8.0 * f64::EPSILON {
        UnitQuaternion::new_normalize(raw)
    } else {
        UnitQuaternion::new_unchecked(raw)
    };
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation: canonical(rotation),
            translation,
        }
    }

    /// Builds a pose from raw `(w, x, y, z)` quaternion components, normalizing them.
    pub fn from_wxyz(q: [f64; 4], t: [f64; 3]) -> Self {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let t = Vec3::new(t[0], t[1], t[2]);
        Self::new(UnitQuaternion::new_unchecked(quat), t)
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64, t: Vec3) -> Self {
        let axis = Unit::new_normalize(*axis);
        Self::new(UnitQuaternion::from_axis_angle(&axis, angle), t)
    }

    /// Rotation given as a rotation vector (axis times angle).
    pub fn from_rotation_vector(rv: &Vec3, t: Vec3) -> Self {
        Self::new(UnitQuaternion::from_scaled_axis(*rv), t)
    }

    /// The rotation matrix must be orthonormal; it is projected to the closest rotation.
    pub fn from_rotation_matrix(r: &Matrix3<f64>, t: Vec3) -> Self {
        // nearest rotation (polar projection), then a direct matrix-to-quaternion conversion
        let svd = r.svd(true, true);
        let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
        let mut m = u * v_t;
        if m.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            m = u * v_t;
        }
        let rot = Rotation3::from_matrix_unchecked(m);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), t)
    }

    /// Camera-style look-at: the returned pose maps camera coordinates (z forward,
    /// x right, y down) into the frame `eye` and `target` are expressed in.
    pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> Self {
        let z = (target - eye).normalize();
        let mut x = z.cross(up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vec3::x());
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_columns(&[x, y, z]);
        Self::from_rotation_matrix(&r, *eye)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn with_translation(&self, t: Vec3) -> Self {
        Self {
            rotation: self.rotation,
            translation: t,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `(w, x, y, z)`.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn is_finite(&self) -> bool {
        self.quaternion_wxyz().iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose::new(inv, -(inv * self.translation))
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.rotation * v + self.translation
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// The pose `r` with `self ∘ r == target`.
    pub fn relative(&self, target: &Pose) -> Pose {
        self.inverse().compose(target)
    }

    /// Shortest-arc slerp on rotation, linear on translation.
    pub fn interpolate(&self, other: &Pose, s: f64) -> Result<Pose, GeometryError> {
        if !(0.0..=1.0).contains(&s) {
            return Err(GeometryError::InterpolationParameter(s));
        }
        if s == 0.0 {
            return Ok(*self);
        }
        if s == 1.0 {
            return Ok(*other);
        }
        let t = self.translation + (other.translation - self.translation) * s;
        Ok(Pose::new(slerp(&self.rotation, &other.rotation, s), t))
    }

    /// Geodesic rotation angle between the two orientations, radians in `[0, π]`.
    pub fn angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    pub fn distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Rotation vector (axis·angle) of this pose's rotation.
    pub fn rotation_vector(&self) -> Vec3 {
        self.rotation.scaled_axis()
    }

    pub fn approx_eq(&self, other: &Pose, tol: f64) -> bool {
        self.distance_to(other) <= tol && self.angle_to(other) <= tol
    }

    /// 7 little-endian f64 values: `w x y z tx ty tz`.
    pub fn to_bytes(&self) -> [u8; 56] {
        let mut out = [0u8; 56];
        let q = self.quaternion_wxyz();
        let vals = [
            q[0],
            q[1],
            q[2],
            q[3],
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ];
        for (chunk, v) in out.chunks_exact_mut(8).zip(vals) {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Pose, GeometryError> {
        if buf.len() != 56 {
            return Err(GeometryError::BufferLength(buf.len()));
        }
        let mut vals = [0f64; 7];
        for (v, chunk) in vals.iter_mut().zip(buf.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Pose::from_wxyz(
            [vals[0], vals[1], vals[2], vals[3]],
            [vals[4], vals[5], vals[6]],
        ))
    }
}

fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, s: f64) -> UnitQuaternion<f64> {
    let qa = a.into_inner();
    let mut qb = b.into_inner();
    let mut dot = qa.coords.dot(&qb.coords);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    let dot = dot.min(1.0);
    if dot > 1.0 - 1e-12 {
        return UnitQuaternion::new_normalize(qa * (1.0 - s) + qb * s);
    }
    let theta = dot.acos();
    let sin_theta = theta.sin();
    let wa = ((1.0 - s) * theta).sin() / sin_theta;
    let wb = (s * theta).sin() / sin_theta;
    UnitQuaternion::new_normalize(qa * wa + qb * wb)
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    q: [f64; 4],
    t: [f64; 3],
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        PoseRepr {
            q: self.quaternion_wxyz(),
            t: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = PoseRepr::deserialize(deserializer)?;
        let norm = repr.q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm < 1e-12 || repr.t.iter().any(|v| !v.is_finite()) {
            return Err(serde::de::Error::custom("invalid pose"));
        }
        Ok(Pose::from_wxyz(repr.q, repr.t))
    }
}

/// Homogeneous-matrix helpers kept separate from the quaternion path so the two
/// can cross-check each other.
pub mod matrix {
    use super::*;

    pub fn apply(m: &Matrix4<f64>, v: &Vec3) -> Vec3 {
        let h = m * v.push(1.0);
        Vec3::new(h.x, h.y, h.z)
    }

    pub fn rotation_z(angle: f64) -> Matrix3<f64> {
        let (s, c) = angle.sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    /// Rodrigues' formula.
    pub fn rotation_axis_angle(axis: &Vec3, angle: f64) -> Matrix3<f64> {
        let k = axis.normalize();
        let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
        Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    pub(crate) fn random_pose(rng: &mut impl Rng) -> Pose {
        let q = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let t = [
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        ];
        Pose::from_wxyz(q, t)
    }

    fn random_vec(rng: &mut impl Rng) -> Vec3 {
        Vec3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        )
    }

    /// Homogeneous matrix built from the raw quaternion formula, not nalgebra's conversion.
    fn oracle_matrix(p: &Pose) -> Matrix4<f64> {
        let [w, x, y, z] = p.quaternion_wxyz();
        let r = Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        );
        let t = p.translation();
        let mut m = Matrix4::identity();
        for i in 0..3 {
            for j in 0..3 {
                m[(i, j)] = r[(i, j)];
            }
            m[(i, 3)] = t[i];
        }
        m
    }

    fn assert_pose_eq(a: &Pose, b: &Pose, tol: f64) {
        assert!(
            a.distance_to(b) <= tol && a.angle_to(b) <= tol,
            "{a:?} != {b:?}"
        );
    }

    #[test]
    fn compose_identity_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_pose(&mut rng);
        assert_pose_eq(&Pose::identity().compose(&p), &p, 1e-12);
        assert_pose_eq(&p.compose(&p.inverse()), &Pose::identity(), 1e-9);
    }

    #[test]
    fn compose_matches_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let m = oracle_matrix(&a) * oracle_matrix(&b);
            let c = oracle_matrix(&a.compose(&b));
            assert!((m - c).abs().max() < 1e-9);
            let v = random_vec(&mut rng);
            assert!((a.compose(&b).apply(&v) - a.apply(&b.apply(&v))).norm() < 1e-9);
        }
    }

    #[test]
    fn invert_cases() {
        assert_pose_eq(&Pose::identity().inverse(), &Pose::identity(), 0.0);
        let p = Pose::from_translation(Vec3::new(0.0, 0.0, 2.0)).inverse();
        assert_eq!(*p.translation(), Vec3::new(0.0, 0.0, -2.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = random_pose(&mut rng);
            let inv = oracle_matrix(&p).try_inverse().unwrap();
            assert!((inv - oracle_matrix(&p.inverse())).abs().max() < 1e-9);
        }
    }

    #[test]
    fn apply_cases() {
        let v = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(Pose::identity().apply(&v), v);
        let rz = Pose::from_axis_angle(&Vec3::z(), FRAC_PI_2, Vec3::zeros());
        assert!((rz.apply(&Vec3::x()) - Vec3::y()).norm() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let p = random_pose(&mut rng);
            let v = random_vec(&mut rng);
            assert!((p.apply(&v) - matrix::apply(&oracle_matrix(&p), &v)).norm() < 1e-9);
        }
    }

    #[test]
    fn relative_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_pose(&mut rng);
        assert_pose_eq(&p.relative(&p), &Pose::identity(), 1e-9);
        assert_pose_eq(&Pose::identity().relative(&p), &p, 1e-12);
        for _ in 0..100 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            assert_pose_eq(&a.compose(&a.relative(&b)), &b, 1e-9);
        }
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_pose(&mut rng);
        let b = random_pose(&mut rng);
        assert_eq!(a.interpolate(&b, 0.0).unwrap(), a);
        assert_eq!(a.interpolate(&b, 1.0).unwrap(), b);

        let b = Pose::from_axis_angle(&Vec3::z(), PI, Vec3::new(2.0, 0.0, 0.0));
        let mid = Pose::identity().interpolate(&b, 0.5).unwrap();
        let expected = Pose::from_axis_angle(&Vec3::z(), FRAC_PI_2, Vec3::new(1.0, 0.0, 0.0));
        assert_pose_eq(&mid, &expected, 1e-9);
    }

    #[test]
    fn interpolate_rejects_out_of_range() {
        let p = Pose::identity();
        assert_eq!(
            p.interpolate(&p, 1.5),
            Err(GeometryError::InterpolationParameter(1.5))
        );
        assert!(p.interpolate(&p, -0.1).is_err());
    }

    #[test]
    fn interpolate_takes_shortest_arc() {
        let a = Pose::from_axis_angle(&Vec3::z(), 0.1, Vec3::zeros());
        let b = Pose::from_axis_angle(&Vec3::z(), -0.1, Vec3::zeros());
        let mid = a.interpolate(&b, 0.5).unwrap();
        assert!(mid.angle_to(&Pose::identity()) < 1e-9);
    }

    #[test]
    fn associativity_involution_and_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let c = random_pose(&mut rng);
            assert_pose_eq(&a.compose(&b).compose(&c), &a.compose(&b.compose(&c)), 1e-9);
            assert_pose_eq(&a.inverse().inverse(), &a, 1e-9);
            assert_relative_eq!(a.rotation_matrix().determinant(), 1.0, epsilon = 1e-9);
            let n = a.quaternion_wxyz().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
            assert!(a.quaternion_wxyz()[0] >= 0.0);
            let u = random_vec(&mut rng);
            let v = random_vec(&mut rng);
            let d0 = (u - v).norm();
            let d1 = (a.apply(&u) - a.apply(&v)).norm();
            assert!((d0 - d1).abs() < 1e-9);
        }
    }

    #[test]
    fn json_and_binary_forms() {
        let p = Pose::from_axis_angle(&Vec3::new(1.0, 1.0, 0.0), 0.7, Vec3::new(0.1, -0.2, 0.3));
        let json = serde_json::to_value(p).unwrap();
        assert_eq!(json["q"].as_array().unwrap().len(), 4);
        assert_eq!(json["t"][2].as_f64().unwrap(), 0.3);
        let back: Pose = serde_json::from_value(json).unwrap();
        assert_eq!(back.to_bytes(), p.to_bytes());
        let bytes = p.to_bytes();
        assert_eq!(&bytes[0..8], &p.quaternion_wxyz()[0].to_le_bytes());
        assert_eq!(Pose::from_bytes(&bytes).unwrap().to_bytes(), bytes);
        assert_eq!(Pose::from_bytes(&bytes[..10]), Err(GeometryError::BufferLength(10)));
    }

    #[test]
    fn matrix_helpers_agree() {
        let r = matrix::rotation_axis_angle(&Vec3::z(), 0.3);
        assert!((r - matrix::rotation_z(0.3)).abs().max() < 1e-12);
    }
}
