//! Rotation and translation algebra, pinhole projection, and the pose metrics.
//!
//! Conventions fixed here and used everywhere else in the crate:
//!
//! - Quaternions are **scalar-first** `(w, x, y, z)`, Hamilton product,
//!   and encode the camera-from-body rotation: `X_cam = R(q) * p_body + t`.
//! - Translations are in meters, expressed in the camera frame.
//! - Pixel coordinates are continuous, with integer values at pixel sample
//!   points; the principal point defaults to exactly `(W/2, H/2)`.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum depth (m) in front of the camera for a point to be projectable.
pub const MIN_DEPTH_M: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("quaternion norm {norm} deviates from unit beyond tolerance {tol}")]
    NonUnitQuaternion { norm: f64, tol: f64 },
    #[error("quaternion norm {0} is too small to normalize")]
    DegenerateQuaternion(f64),
    #[error("point {index} has non-positive depth {depth} m in the camera frame")]
    BehindCamera { index: usize, depth: f64 },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("ground-truth translation has zero norm")]
    ZeroNormTranslation,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

/// Unit quaternion, scalar-first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Self = Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Axis-angle constructor; `axis` need not be normalized.
    pub fn from_axis_angle(axis: Vector3<f64>, angle_rad: f64) -> Self {
        let n = axis.norm();
        if n < 1e-300 {
            return Self::IDENTITY;
        }
        let half = 0.5 * angle_rad;
        let s = half.sin() / n;
        Self::new(half.cos(), axis.x * s, axis.y * s, axis.z * s)
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(self, other: Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn neg(self) -> Self {
        Self::new(-self.w, -self.x, -self.y, -self.z)
    }

    pub fn normalized(self) -> Result<Self, GeometryError> {
        let n = self.norm();
        if !n.is_finite() || n < 1e-8 {
            return Err(GeometryError::DegenerateQuaternion(n));
        }
        Ok(Self::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Hamilton product `self ⊗ rhs` (apply `rhs` first, then `self`).
    pub fn hamilton(self, rhs: Self) -> Self {
        Self::new(
            self.w * rhs.w - self.x * rhs.x - self.y * rhs.y - self.z * rhs.z,
            self.w * rhs.x + self.x * rhs.w + self.y * rhs.z - self.z * rhs.y,
            self.w * rhs.y - self.x * rhs.z + self.y * rhs.w + self.z * rhs.x,
            self.w * rhs.z + self.x * rhs.y - self.y * rhs.x + self.z * rhs.w,
        )
    }
}

/// Rigid camera-from-body transform: unit quaternion plus translation in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    q: Quat,
    t: Vector3<f64>,
}

impl Pose {
    /// Normalizes `q`; rejects degenerate quaternions and non-finite translations.
    pub fn new(q: Quat, t: Vector3<f64>) -> Result<Self, GeometryError> {
        if !(t.x.is_finite() && t.y.is_finite() && t.z.is_finite()) {
            return Err(GeometryError::NonFinite("translation"));
        }
        Ok(Self { q: q.normalized()?, t })
    }

    pub fn identity_at(t: Vector3<f64>) -> Result<Self, GeometryError> {
        Self::new(Quat::IDENTITY, t)
    }

    pub fn quat(&self) -> Quat {
        self.q
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.t
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        // q is unit by construction; the tolerance check cannot fire.
        quat_to_matrix(self.q).expect("pose quaternion is unit")
    }

    /// Body-frame point into the camera frame.
    pub fn transform(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.t
    }
}

/// Pinhole intrinsics and image geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub width_px: u32,
    pub height_px: u32,
    pub f_px: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraModel {
    pub fn new(
        width_px: u32,
        height_px: u32,
        f_px: f64,
        cx: f64,
        cy: f64,
    ) -> Result<Self, GeometryError> {
        if width_px == 0 || height_px == 0 {
            return Err(GeometryError::InvalidCamera("zero image dimension".into()));
        }
        if !(f_px.is_finite() && f_px > 0.0) {
            return Err(GeometryError::InvalidCamera(format!("focal length {f_px} px")));
        }
        if !(0.0..width_px as f64).contains(&cx) || !(0.0..height_px as f64).contains(&cy) {
            return Err(GeometryError::InvalidCamera(format!(
                "principal point ({cx}, {cy}) outside {width_px}x{height_px} image"
            )));
        }
        Ok(Self { width_px, height_px, f_px, cx, cy })
    }

    /// Square-pixel camera from a field of view, principal point at the exact
    /// image center: `f_px = W / (2 tan(FOV/2))`.
    pub fn from_fov(width_px: u32, height_px: u32, fov_deg: f64) -> Result<Self, GeometryError> {
        if !(fov_deg.is_finite() && fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(GeometryError::InvalidCamera(format!("field of view {fov_deg} deg")));
        }
        let half = 0.5 * fov_deg.to_radians();
        let f_px = width_px as f64 / (2.0 * half.tan());
        Self::new(width_px, height_px, f_px, width_px as f64 / 2.0, height_px as f64 / 2.0)
    }

    /// Camera-frame point to pixel coordinates. Depth must exceed [`MIN_DEPTH_M`].
    pub fn project_camera_point(&self, p: Vector3<f64>) -> Option<Vector2<f64>> {
        if p.z <= MIN_DEPTH_M {
            return None;
        }
        Some(Vector2::new(
            self.f_px * p.x / p.z + self.cx,
            self.f_px * p.y / p.z + self.cy,
        ))
    }

    pub fn contains(&self, uv: Vector2<f64>) -> bool {
        uv.x >= 0.0 && uv.x < self.width_px as f64 && uv.y >= 0.0 && uv.y < self.height_px as f64
    }
}

/// Unit quaternion to rotation matrix. Rejects inputs whose norm deviates from
/// one by more than `1e-6`.
pub fn quat_to_matrix(q: Quat) -> Result<Matrix3<f64>, GeometryError> {
    let n = q.norm();
    if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
        return Err(GeometryError::NonUnitQuaternion { norm: n, tol: 1e-6 });
    }
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Rotation matrix to unit quaternion (Shepperd's method). Returns one of the
/// two equivalent signs.
pub fn matrix_to_quat(m: &Matrix3<f64>) -> Quat {
    let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        Quat::new(
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        )
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        Quat::new(
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        )
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        Quat::new(
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        )
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        Quat::new(
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        )
    };
    // Re-normalize to absorb rounding in the square roots.
    q.normalized().expect("rotation matrix produced a degenerate quaternion")
}

/// Project body-frame points through `pose` into pixel coordinates.
///
/// Fails on the first point whose camera-frame depth is not positive,
/// reporting its index.
pub fn project(
    camera: &CameraModel,
    pose: &Pose,
    points: &[Vector3<f64>],
) -> Result<Vec<Vector2<f64>>, GeometryError> {
    let rot = pose.rotation_matrix();
    let t = pose.translation();
    points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let pc = rot * p + t;
            camera
                .project_camera_point(pc)
                .ok_or(GeometryError::BehindCamera { index, depth: pc.z })
        })
        .collect()
}

/// Euclidean distance between the estimated and true translation, in meters.
pub fn translation_error(t_hat: Vector3<f64>, t: Vector3<f64>) -> Result<f64, GeometryError> {
    for v in [&t_hat, &t] {
        if !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite()) {
            return Err(GeometryError::NonFinite("translation"));
        }
    }
    Ok((t_hat - t).norm())
}

/// Geodesic rotation distance in radians, in `[0, π]`.
///
/// Computed as `2·arccos(min(1, |⟨q_hat, q⟩|))`, which is equivalent to the
/// trace form `arccos((trace(R̂Rᵀ)−1)/2)` but stays well conditioned near π
/// and is invariant to quaternion sign. Near zero the arccos itself loses
/// precision, so small angles switch to the chord form
/// `4·arcsin(min(||q̂−q||, ||q̂+q||)/2)`, exact at q_hat = ±q.
pub fn rotation_error(q_hat: Quat, q: Quat) -> f64 {
    let d = q_hat.dot(q).abs().min(1.0);
    if d < 0.999 {
        return 2.0 * d.acos();
    }
    let chord = |s: f64| {
        ((q_hat.w - s * q.w).powi(2)
            + (q_hat.x - s * q.x).powi(2)
            + (q_hat.y - s * q.y).powi(2)
            + (q_hat.z - s * q.z).powi(2))
        .sqrt()
    };
    let m = chord(1.0).min(chord(-1.0));
    4.0 * (0.5 * m).min(1.0).asin()
}

/// Composite pose metric: `E_R + E_T / ||t_gt||` (dimensionless).
pub fn speed_score(pose_hat: &Pose, pose_gt: &Pose) -> Result<f64, GeometryError> {
    let t_norm = pose_gt.translation().norm();
    if t_norm <= 0.0 {
        return Err(GeometryError::ZeroNormTranslation);
    }
    let e_t = translation_error(pose_hat.translation(), pose_gt.translation())?;
    Ok(rotation_error(pose_hat.quat(), pose_gt.quat()) + e_t / t_norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    pub(crate) fn random_unit_quat(rng: &mut impl Rng) -> Quat {
        loop {
            let q = Quat::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = q.norm();
            if n > 1e-3 {
                return q.normalized().unwrap();
            }
        }
    }

    #[test]
    fn quat_to_matrix_identity() {
        let m = quat_to_matrix(Quat::IDENTITY).unwrap();
        assert_eq!(m, Matrix3::identity());
    }

    #[test]
    fn quat_to_matrix_half_turn_about_z() {
        let m = quat_to_matrix(Quat::new(0.0, 0.0, 0.0, 1.0)).unwrap();
        let expected = Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0));
        assert_relative_eq!(m, expected, epsilon = 1e-15);
    }

    #[test]
    fn quat_to_matrix_rejects_non_unit() {
        let err = quat_to_matrix(Quat::new(1.0, 0.1, 0.0, 0.0));
        assert!(matches!(err, Err(GeometryError::NonUnitQuaternion { .. })));
    }

    #[test]
    fn quat_to_matrix_orthonormal_det_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let m = quat_to_matrix(random_unit_quat(&mut rng)).unwrap();
            let gram = m.transpose() * m;
            assert_relative_eq!(gram, Matrix3::identity(), epsilon = 1e-12);
            assert_relative_eq!(m.determinant(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn matrix_quat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..500 {
            let q = random_unit_quat(&mut rng);
            let r = matrix_to_quat(&quat_to_matrix(q).unwrap());
            let diff = q.dot(r).abs();
            assert!(diff > 1.0 - 1e-9, "round trip lost the rotation: |dot| = {diff}");
            // Componentwise up to sign.
            let r = if q.dot(r) < 0.0 { r.neg() } else { r };
            for (a, b) in q.to_array().iter().zip(r.to_array()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn project_optical_axis_hits_principal_point() {
        let cam = CameraModel::from_fov(64, 64, 35.0).unwrap();
        let pose = Pose::identity_at(Vector3::new(0.0, 0.0, 10.0)).unwrap();
        let px = project(&cam, &pose, &[Vector3::zeros()]).unwrap();
        assert_relative_eq!(px[0].x, cam.cx, epsilon = 1e-12);
        assert_relative_eq!(px[0].y, cam.cy, epsilon = 1e-12);
    }

    #[test]
    fn project_unit_offset() {
        let cam = CameraModel::new(512, 512, 800.0, 256.0, 256.0).unwrap();
        let pose = Pose::identity_at(Vector3::new(0.0, 0.0, 10.0)).unwrap();
        let px = project(&cam, &pose, &[Vector3::new(1.0, 0.0, 0.0)]).unwrap();
        assert_relative_eq!(px[0].x, 336.0, epsilon = 1e-12);
        assert_relative_eq!(px[0].y, 256.0, epsilon = 1e-12);
    }

    #[test]
    fn project_reports_behind_camera_index() {
        let cam = CameraModel::from_fov(64, 64, 35.0).unwrap();
        let pose = Pose::identity_at(Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let pts = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.0, 0.0, -2.0)];
        match project(&cam, &pose, &pts) {
            Err(GeometryError::BehindCamera { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected behind-camera error, got {other:?}"),
        }
    }

    #[test]
    fn translation_error_cases() {
        let t = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(translation_error(t, t).unwrap(), 0.0);
        assert_eq!(
            translation_error(Vector3::new(0.0, 0.0, 4.0), Vector3::new(0.0, 0.0, 1.0)).unwrap(),
            3.0
        );
        assert_eq!(
            translation_error(Vector3::new(3.0, 4.0, 0.0), Vector3::zeros()).unwrap(),
            5.0
        );
        assert!(translation_error(Vector3::new(f64::NAN, 0.0, 0.0), t).is_err());
    }

    #[test]
    fn rotation_error_cases() {
        let id = Quat::IDENTITY;
        assert_eq!(rotation_error(id, id), 0.0);
        let half_turn_z = Quat::new(0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(rotation_error(id, half_turn_z), PI, epsilon = 1e-12);
        let quarter_x = Quat::from_axis_angle(Vector3::x(), PI / 2.0);
        assert_relative_eq!(rotation_error(id, quarter_x), PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn speed_score_cases() {
        let gt = Pose::identity_at(Vector3::new(0.0, 0.0, 10.0)).unwrap();
        assert_eq!(speed_score(&gt, &gt).unwrap(), 0.0);

        let shifted = Pose::identity_at(Vector3::new(0.0, 0.0, 10.5)).unwrap();
        assert_relative_eq!(speed_score(&shifted, &gt).unwrap(), 0.05, epsilon = 1e-12);

        let t5 = Vector3::new(0.0, 0.0, 5.0);
        let rot = Pose::new(Quat::from_axis_angle(Vector3::x(), PI / 2.0), t5).unwrap();
        let gt5 = Pose::identity_at(t5).unwrap();
        assert_relative_eq!(speed_score(&rot, &gt5).unwrap(), PI / 2.0, epsilon = 1e-12);

        let zero_t = Pose::identity_at(Vector3::zeros()).unwrap();
        assert!(matches!(
            speed_score(&gt, &zero_t),
            Err(GeometryError::ZeroNormTranslation)
        ));
    }

    #[test]
    fn project_matches_homogeneous_matrix_oracle() {
        // Independent pipeline: nalgebra homogeneous transform + explicit
        // intrinsics matrix, instead of the hand-rolled quaternion rotation.
        use nalgebra::{Matrix4, Quaternion, UnitQuaternion, Vector4};

        let cam = CameraModel::from_fov(1024, 1024, 35.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = crate::model::build_target_model();
        for _ in 0..50 {
            let q = random_unit_quat(&mut rng);
            let t = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(5.0..20.0),
            );
            let pose = Pose::new(q, t).unwrap();

            let nq = UnitQuaternion::from_quaternion(Quaternion::new(q.w, q.x, q.y, q.z));
            let mut world_from_body: Matrix4<f64> = nq.to_homogeneous();
            world_from_body.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);

            let kps = model.keypoint_positions();
            let mine = project(&cam, &pose, &kps).unwrap();
            for (p, uv) in kps.iter().zip(mine) {
                let h = world_from_body * Vector4::new(p.x, p.y, p.z, 1.0);
                let expected = Vector2::new(
                    cam.f_px * h.x / h.z + cam.cx,
                    cam.f_px * h.y / h.z + cam.cy,
                );
                assert_relative_eq!(uv, expected, epsilon = 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn rotation_error_double_cover_and_symmetry(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_unit_quat(&mut rng);
            let b = random_unit_quat(&mut rng);
            prop_assert!(rotation_error(a, a.neg()) < 1e-12);
            prop_assert!((rotation_error(a, b) - rotation_error(b, a)).abs() < 1e-12);
        }

        #[test]
        fn speed_score_sign_relabel_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Vector3::new(0.1, -0.2, rng.gen_range(2.0..20.0));
            let a = Pose::new(random_unit_quat(&mut rng), t).unwrap();
            let b = Pose::new(random_unit_quat(&mut rng), t * 1.01).unwrap();
            let base = speed_score(&a, &b).unwrap();
            let flipped = speed_score(
                &Pose::new(a.quat().neg(), a.translation()).unwrap(),
                &Pose::new(b.quat().neg(), b.translation()).unwrap(),
            ).unwrap();
            prop_assert!((base - flipped).abs() < 1e-12);
        }

        #[test]
        fn project_translation_equivariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cam = CameraModel::from_fov(64, 64, 35.0).unwrap();
            let q = random_unit_quat(&mut rng);
            let t = Vector3::new(0.0, 0.0, rng.gen_range(3.0..20.0));
            let p = Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            let delta = Vector3::new(
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
            );
            let pose = Pose::new(q, t).unwrap();
            let rot = pose.rotation_matrix();
            let shifted = Pose::new(q, t + rot * delta).unwrap();
            let a = project(&cam, &pose, &[p]).unwrap();
            let b = project(&cam, &shifted, &[p - delta]).unwrap();
            prop_assert!((a[0] - b[0]).norm() < 1e-9);
        }
    }
}
