//! Camera model and rigid transforms shared by every stage.
//!
//! Conventions: the camera looks down +z, depth images store the camera-frame
//! z coordinate in meters with 0 marking invalid pixels. Rotations are kept as
//! 3x3 matrices and re-orthonormalized when compose chains drift.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// A 3D point in camera or world coordinates (meters).
pub type Point3 = Vector3<f64>;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point has non-positive depth z={0}")]
    NonPositiveDepth(f64),
    #[error("invalid depth value d={0}")]
    InvalidDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("failed to read intrinsics: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse intrinsics: {0}")]
    Parse(#[from] toml::de::Error),
}

/// Pinhole camera intrinsics, all quantities in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0) || !(fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "image size must be positive ({width}x{height})"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Load intrinsics from a plain-text key-value file with keys
    /// `fx`, `fy`, `cx`, `cy`, `width`, `height`.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_config_str(&text)
    }

    pub fn from_config_str(text: &str) -> Result<Self, GeometryError> {
        #[derive(Deserialize)]
        struct Raw {
            fx: f64,
            fy: f64,
            cx: f64,
            cy: f64,
            width: usize,
            height: usize,
        }
        let raw: Raw = toml::from_str(text)?;
        Self::new(raw.fx, raw.fy, raw.cx, raw.cy, raw.width, raw.height)
    }

    /// Intrinsics for a proportionally scaled image.
    pub fn scaled(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }

    pub fn contains(&self, px: Pixel) -> bool {
        px.u >= 0.0 && px.v >= 0.0 && px.u < self.width as f64 && px.v < self.height as f64
    }
}

/// Sub-pixel image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// Perspective projection of a camera-frame point onto the image plane.
pub fn project(p: Point3, k: &CameraIntrinsics) -> Result<Pixel, GeometryError> {
    if !(p.z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(p.z));
    }
    Ok(Pixel {
        u: k.fx * (p.x / p.z) + k.cx,
        v: k.fy * (p.y / p.z) + k.cy,
    })
}

/// Back-projection of a pixel with known depth to a camera-frame point.
///
/// `d` is the camera-frame z coordinate in meters.
pub fn backproject(px: Pixel, d: f64, k: &CameraIntrinsics) -> Result<Point3, GeometryError> {
    if !d.is_finite() || d <= 0.0 {
        return Err(GeometryError::InvalidDepth(d));
    }
    Ok(Vector3::new(
        (px.u - k.cx) * d / k.fx,
        (px.v - k.cy) * d / k.fy,
        d,
    ))
}

/// Orthogonality drift that triggers re-orthonormalization after compose.
const RENORM_TRIGGER: f64 = 1e-7;

/// A rigid transform in SE(3): `p_out = rotation * p_in + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation by `angle` radians about a (not necessarily unit) axis.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        Self {
            rotation: so3_exp(axis.normalize() * angle),
            translation: Vector3::zeros(),
        }
    }

    /// Rigid composition: `(a * b)(p) = a(b(p))`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut out = Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        };
        if orthogonality_error(&out.rotation) > RENORM_TRIGGER {
            out.rotation = orthonormalize(&out.rotation);
        }
        out
    }

    pub fn invert(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform(&self, p: Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    /// Rotates a direction without translating (for normals and rays).
    pub fn rotate(&self, v: Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Interpolates between two poses: linear in translation, geodesic in
    /// rotation. `t` in [0,1] maps from `self` to `other`.
    pub fn interpolate(&self, other: &Pose, t: f64) -> Pose {
        let rel = self.rotation.transpose() * other.rotation;
        let omega = so3_log(&rel);
        Pose {
            rotation: self.rotation * so3_exp(omega * t),
            translation: self.translation * (1.0 - t) + other.translation * t,
        }
    }

    /// Max deviation from the pose invariants (orthogonality and unit det).
    pub fn rotation_error(&self) -> f64 {
        orthogonality_error(&self.rotation).max((self.rotation.determinant() - 1.0).abs())
    }

    /// Row-major rotation followed by translation, the 12-number layout used
    /// in pose files.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    pub fn from_row_major(vals: &[f64; 12]) -> Self {
        Pose {
            rotation: Matrix3::new(
                vals[0], vals[1], vals[2], vals[3], vals[4], vals[5], vals[6], vals[7], vals[8],
            ),
            translation: Vector3::new(vals[9], vals[10], vals[11]),
        }
    }

    /// Camera pose looking from `eye` toward `target` with `up` fixing roll.
    /// The camera frame has +z forward, +x right, +y down.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Pose {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        Pose {
            rotation: Matrix3::from_columns(&[right, down, forward]),
            translation: eye,
        }
    }
}

fn orthogonality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

/// Nearest-rotation projection via Gram-Schmidt on the columns.
fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let c0 = r.column(0).normalize();
    let mut c1 = r.column(1) - c0 * r.column(1).dot(&c0);
    c1.normalize_mut();
    let c2 = c0.cross(&c1);
    Matrix3::from_columns(&[c0, c1, c2])
}

/// Rodrigues formula: rotation matrix of an axis-angle vector.
pub fn so3_exp(omega: Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    if theta < 1e-12 {
        return Matrix3::identity() + skew(&omega);
    }
    let k = skew(&(omega / theta));
    Matrix3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos())
}

/// Axis-angle vector of a rotation matrix (inverse of [`so3_exp`]).
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    if theta < 1e-12 {
        return Vector3::new(
            (r[(2, 1)] - r[(1, 2)]) * 0.5,
            (r[(0, 2)] - r[(2, 0)]) * 0.5,
            (r[(1, 0)] - r[(0, 1)]) * 0.5,
        );
    }
    if (std::f64::consts::PI - theta).abs() < 1e-6 {
        // Near pi the antisymmetric part degenerates; recover the axis from
        // the symmetric part R + I whose columns are parallel to it.
        let m = r + Matrix3::identity();
        let col = (0..3)
            .max_by(|&a, &b| {
                m.column(a)
                    .norm()
                    .partial_cmp(&m.column(b).norm())
                    .unwrap()
            })
            .unwrap();
        let axis = m.column(col).normalize();
        return axis * theta;
    }
    let axis = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    ) / (2.0 * theta.sin());
    axis * theta
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn test_k() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn project_optical_axis_hits_principal_point() {
        let px = project(Vector3::new(0.0, 0.0, 1.0), &test_k()).unwrap();
        assert_eq!(px, Pixel::new(320.0, 240.0));
    }

    #[test]
    fn project_offset_point() {
        let px = project(Vector3::new(0.5, 0.0, 1.0), &test_k()).unwrap();
        assert_eq!(px, Pixel::new(370.0, 240.0));
    }

    #[test]
    fn project_behind_camera_fails() {
        let err = project(Vector3::new(0.0, 0.0, -1.0), &test_k());
        assert!(matches!(err, Err(GeometryError::NonPositiveDepth(_))));
    }

    #[test]
    fn backproject_principal_point() {
        let p = backproject(Pixel::new(320.0, 240.0), 2.0, &test_k()).unwrap();
        assert_relative_eq!(p, Vector3::new(0.0, 0.0, 2.0), epsilon = 1e-12);
    }

    #[test]
    fn backproject_offset() {
        let p = backproject(Pixel::new(420.0, 240.0), 1.0, &test_k()).unwrap();
        assert_relative_eq!(p, Vector3::new(1.0, 0.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn backproject_zero_depth_fails() {
        let err = backproject(Pixel::new(100.0, 100.0), 0.0, &test_k());
        assert!(matches!(err, Err(GeometryError::InvalidDepth(_))));
        let err = backproject(Pixel::new(100.0, 100.0), f64::NAN, &test_k());
        assert!(matches!(err, Err(GeometryError::InvalidDepth(_))));
    }

    #[test]
    fn compose_with_identity() {
        let t = Pose::new(
            so3_exp(Vector3::new(0.1, -0.2, 0.3)),
            Vector3::new(1.0, 2.0, 3.0),
        );
        let c = Pose::identity().compose(&t);
        assert_relative_eq!(c.rotation, t.rotation, epsilon = 1e-12);
        assert_relative_eq!(c.translation, t.translation, epsilon = 1e-12);
    }

    #[test]
    fn invert_pure_translation() {
        let t = Pose::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let inv = t.invert();
        assert_relative_eq!(inv.translation, Vector3::new(0.0, 0.0, -1.0), epsilon = 1e-12);
    }

    #[test]
    fn compose_translations_adds() {
        let a = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let b = Pose::from_translation(Vector3::new(0.0, 1.0, 0.0));
        let c = a.compose(&b);
        assert_relative_eq!(c.translation, Vector3::new(1.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn intrinsics_from_config() {
        let k = CameraIntrinsics::from_config_str(
            "fx = 100.0\nfy = 110.0\ncx = 80.0\ncy = 60.0\nwidth = 160\nheight = 120\n",
        )
        .unwrap();
        assert_eq!(k.fx, 100.0);
        assert_eq!(k.width, 160);
        assert!(CameraIntrinsics::from_config_str("fx = -1.0\nfy = 1.0\ncx = 0\ncy = 0\nwidth = 1\nheight = 1").is_err());
    }

    #[test]
    fn so3_log_exp_round_trip() {
        for omega in [
            Vector3::new(0.3, -0.1, 0.2),
            Vector3::new(0.0, 0.0, 1e-14),
            Vector3::new(3.1, 0.2, 0.0),
        ] {
            let r = so3_exp(omega);
            let back = so3_log(&r);
            assert_relative_eq!(so3_exp(back), r, epsilon = 1e-9);
        }
    }

    #[test]
    fn look_at_points_camera_at_target() {
        let pose = Pose::look_at(
            Vector3::new(0.0, -1.0, 0.5),
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        );
        // The target must land on the optical axis in front of the camera.
        let cam = pose.invert().transform(Vector3::zeros());
        assert!(cam.z > 0.0);
        assert_relative_eq!(cam.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(cam.y, 0.0, epsilon = 1e-12);
    }

    /// Brute-force oracle: projection through the explicit homogeneous
    /// intrinsic matrix, dehomogenized by hand.
    fn project_homogeneous(p: Point3, k: &CameraIntrinsics) -> Pixel {
        let km = Matrix3::new(k.fx, 0.0, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0);
        let h = km * p;
        Pixel::new(h.x / h.z, h.y / h.z)
    }

    fn backproject_homogeneous(px: Pixel, d: f64, k: &CameraIntrinsics) -> Point3 {
        let km = Matrix3::new(k.fx, 0.0, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0);
        let inv = km.try_inverse().unwrap();
        inv * Vector3::new(px.u, px.v, 1.0) * d
    }

    #[test]
    fn matches_homogeneous_oracle_on_random_samples() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let k = test_k();
        for _ in 0..1000 {
            let p = Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.1..5.0),
            );
            let ours = project(p, &k).unwrap();
            let oracle = project_homogeneous(p, &k);
            assert_relative_eq!(ours.u, oracle.u, epsilon = 1e-9);
            assert_relative_eq!(ours.v, oracle.v, epsilon = 1e-9);

            let px = Pixel::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0));
            let d = rng.gen_range(0.1..5.0);
            let ours = backproject(px, d, &k).unwrap();
            let oracle = backproject_homogeneous(px, d, &k);
            assert_relative_eq!(ours, oracle, epsilon = 1e-9);
        }
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            -3.0f64..3.0,
            -3.0f64..3.0,
            -3.0f64..3.0,
            -1.0f64..1.0,
            -1.0f64..1.0,
            -1.0f64..1.0,
        )
            .prop_map(|(wx, wy, wz, tx, ty, tz)| {
                Pose::new(so3_exp(Vector3::new(wx, wy, wz)), Vector3::new(tx, ty, tz))
            })
    }

    proptest! {
        #[test]
        fn prop_project_backproject_round_trip(
            x in -2.0f64..2.0,
            y in -2.0f64..2.0,
            z in 0.05f64..5.0,
        ) {
            let k = test_k();
            let p = Vector3::new(x, y, z);
            let px = project(p, &k).unwrap();
            let back = backproject(px, z, &k).unwrap();
            prop_assert!((back - p).norm() < 1e-6);
        }

        #[test]
        fn prop_pose_group_laws(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!((left.rotation - right.rotation).abs().max() < 1e-9);
            prop_assert!((left.translation - right.translation).norm() < 1e-9);

            let e = a.compose(&a.invert());
            prop_assert!((e.rotation - Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!(e.translation.norm() < 1e-9);
            let e2 = a.invert().compose(&a);
            prop_assert!((e2.rotation - Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!(e2.translation.norm() < 1e-9);
        }

        #[test]
        fn prop_transform_matches_definition(a in arb_pose(), x in -2.0f64..2.0, y in -2.0f64..2.0, z in -2.0f64..2.0) {
            let p = Vector3::new(x, y, z);
            let got = a.transform(p);
            let want = a.rotation * p + a.translation;
            prop_assert!((got - want).norm() < 1e-12);
        }
    }

    #[test]
    fn long_compose_chain_stays_orthonormal() {
        let step = Pose::new(
            so3_exp(Vector3::new(1e-3, 2e-3, -1e-3)),
            Vector3::new(0.01, 0.0, 0.0),
        );
        let mut acc = Pose::identity();
        for _ in 0..100_000 {
            acc = acc.compose(&step);
        }
        assert!(acc.rotation_error() < 1e-9);
    }
}
