//! Rigid transforms, the ToF camera model, and conversions between depth
//! images, pixels and point clouds.

use nalgebra::{Matrix3, Matrix4, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::ops::Mul;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Frobenius-norm deviation from orthonormality that is silently repaired.
pub const ORTHONORMAL_REPAIR_TOL: f64 = 1e-6;

const BEHIND_CAMERA_EPS: f64 = 1e-9;
const UNDISTORT_MAX_ITERS: usize = 20;
const UNDISTORT_TOL_PX: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("matrix is not a rotation (orthonormality error {error:.3e}, det {det:.6})")]
    NotARotation { error: f64, det: f64 },
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("image buffers do not match {width}x{height}")]
    DimensionMismatch { width: usize, height: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Projects an arbitrary 3x3 matrix onto the closest rotation in the
/// Frobenius sense (polar decomposition via SVD, with the sign fix that keeps
/// det = +1).
pub fn nearest_rotation(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Mat3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

fn orthonormality_error(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).norm()
}

/// A proper rigid motion `p -> R p + t`.
///
/// Transforms are named by the frame they map *from* and the frame they map
/// *to*, e.g. `camera_to_base.transform_point(p_camera)` yields the point in
/// the robot base frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    rotation: Mat3,
    translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a transform, re-orthonormalizing `rotation` when it is within
    /// [`ORTHONORMAL_REPAIR_TOL`] of a rotation and rejecting it otherwise.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        Self::with_tolerance(rotation, translation, ORTHONORMAL_REPAIR_TOL)
    }

    pub fn with_tolerance(rotation: Mat3, translation: Vec3, tol: f64) -> Result<Self, GeometryError> {
        if !rotation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("rotation"));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("translation"));
        }
        let error = orthonormality_error(&rotation);
        let det = rotation.determinant();
        if error >= tol || det <= 0.0 {
            return Err(GeometryError::NotARotation { error, det });
        }
        let rotation = if error > 0.0 {
            nearest_rotation(&rotation)
        } else {
            rotation
        };
        Ok(Self { rotation, translation })
    }

    /// Assumes `rotation` is already orthonormal; used internally by the
    /// solvers after an explicit projection.
    pub(crate) fn from_rotation_unchecked(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation,
        }
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64, translation: Vec3) -> Self {
        let rotation = if axis.norm() == 0.0 || angle == 0.0 {
            Mat3::identity()
        } else {
            *UnitQuaternion::from_axis_angle(&Unit::new_normalize(*axis), angle)
                .to_rotation_matrix()
                .matrix()
        };
        Self { rotation, translation }
    }

    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation: Vec3::zeros(),
        }
    }

    /// Pose of a camera at `eye` looking at `target`, with image y pointing
    /// away from `up`. Maps camera coordinates (x right, y down, z forward)
    /// into the frame `eye`, `target` and `up` are expressed in.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self, GeometryError> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or(GeometryError::NonFinite("look_at direction"))?;
        let x = z
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or(GeometryError::NonFinite("look_at up vector"))?;
        let y = z.cross(&x);
        Ok(Self {
            rotation: Mat3::from_columns(&[x, y, z]),
            translation: eye,
        })
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Rotation angle in radians, in [0, π].
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    pub fn with_translation(&self, translation: Vec3) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation,
            translation,
        }
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        let m = self.to_matrix4();
        let mut rows = [[0.0; 4]; 4];
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = m[(r, c)];
            }
        }
        rows
    }

    /// Parses a row-major homogeneous matrix; the bottom row must be
    /// `[0 0 0 1]` and the rotation block must pass the `tol` check.
    pub fn from_rows(rows: &[[f64; 4]; 4], tol: f64) -> Result<Self, GeometryError> {
        let bottom = rows[3];
        if bottom[0].abs() > tol || bottom[1].abs() > tol || bottom[2].abs() > tol || (bottom[3] - 1.0).abs() > tol {
            return Err(GeometryError::NotARotation {
                error: f64::INFINITY,
                det: f64::NAN,
            });
        }
        let r = Mat3::from_fn(|i, j| rows[i][j]);
        let t = Vec3::new(rows[0][3], rows[1][3], rows[2][3]);
        // Validated but kept as stored, so a write/read cycle is lossless.
        Self::with_tolerance(r, t, tol)?;
        Ok(Self {
            rotation: r,
            translation: t,
        })
    }

    /// Angular (radians) and translational (meters) distance to `other`.
    pub fn distance_to(&self, other: &RigidTransform) -> (f64, f64) {
        let rel = self.rotation.transpose() * other.rotation;
        (rotation_angle(&rel), (self.translation - other.translation).norm())
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

impl Mul<&RigidTransform> for &RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: &RigidTransform) -> RigidTransform {
        self.compose(rhs)
    }
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

pub fn rotation_angle(r: &Mat3) -> f64 {
    // atan2 form stays accurate near 0 and π where acos of the trace does not.
    let skew = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let s = 0.5 * skew.norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

/// Brown–Conrady lens distortion: three radial and two tangential terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Distortion {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub p1: f64,
    pub p2: f64,
}

impl Distortion {
    pub fn is_zero(&self) -> bool {
        self.k1 == 0.0 && self.k2 == 0.0 && self.k3 == 0.0 && self.p1 == 0.0 && self.p2 == 0.0
    }

    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        let dx = 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
        let dy = self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
        (x * radial + dx, y * radial + dy)
    }

    /// Jacobian of [`Distortion::apply`] as `[[dx'/dx, dx'/dy], [dy'/dx, dy'/dy]]`.
    fn jacobian(&self, x: f64, y: f64) -> [[f64; 2]; 2] {
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        let g = self.k1 + r2 * (2.0 * self.k2 + 3.0 * self.k3 * r2);
        let cross = 2.0 * g * x * y + 2.0 * self.p1 * x + 2.0 * self.p2 * y;
        [
            [radial + 2.0 * g * x * x + 2.0 * self.p1 * y + 6.0 * self.p2 * x, cross],
            [cross, radial + 2.0 * g * y * y + 6.0 * self.p1 * y + 2.0 * self.p2 * x],
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub distortion: Distortion,
}

impl CameraIntrinsics {
    pub const TOF_WIDTH: usize = 352;
    pub const TOF_HEIGHT: usize = 287;

    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        distortion: Distortion,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            distortion,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidIntrinsics(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be non-zero");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad("cx outside image");
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("cy outside image");
        }
        Ok(())
    }

    /// Simulator default for the 352x287 ToF sensor (about 100°x85° field of
    /// view, no distortion).
    pub fn tof_default() -> Self {
        Self {
            fx: 150.0,
            fy: 150.0,
            cx: 175.5,
            cy: 143.0,
            width: Self::TOF_WIDTH,
            height: Self::TOF_HEIGHT,
            distortion: Distortion::default(),
        }
    }

    /// Same field of view at a different resolution.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
            distortion: self.distortion,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Normalized image coordinates of pixel (u, v) with distortion removed.
    pub fn undistort(&self, u: f64, v: f64) -> (f64, f64) {
        let xd = (u - self.cx) / self.fx;
        let yd = (v - self.cy) / self.fy;
        if self.distortion.is_zero() {
            return (xd, yd);
        }
        let tol = UNDISTORT_TOL_PX / self.fx.max(self.fy);
        let (mut x, mut y) = (xd, yd);
        for _ in 0..UNDISTORT_MAX_ITERS {
            let (px, py) = self.distortion.apply(x, y);
            let (ex, ey) = (xd - px, yd - py);
            if ex.abs() < tol && ey.abs() < tol {
                break;
            }
            let [[a, b], [c, d]] = self.distortion.jacobian(x, y);
            let det = a * d - b * c;
            if det.abs() < 1e-12 {
                x += ex;
                y += ey;
            } else {
                x += (d * ex - b * ey) / det;
                y += (a * ey - c * ex) / det;
            }
        }
        (x, y)
    }

    /// Unit-depth ray (z = 1) through pixel (u, v).
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        let (x, y) = self.undistort(u, v);
        Vec3::new(x, y, 1.0)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u > -0.5 && v > -0.5 && u < self.width as f64 - 0.5 && v < self.height as f64 - 0.5
    }

    /// Nearest pixel index for a sub-pixel location, if it lies in the image.
    pub fn pixel_index(&self, u: f64, v: f64) -> Option<usize> {
        if !self.contains(u, v) {
            return None;
        }
        let x = u.round() as usize;
        let y = v.round() as usize;
        (x < self.width && y < self.height).then_some(y * self.width + x)
    }
}

/// Result of projecting a camera-frame point into the image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Distorted pinhole projection; `None` when the point is at or behind the
/// image plane.
pub fn project_point(p: &Vec3, k: &CameraIntrinsics) -> Option<Projection> {
    if p.z <= BEHIND_CAMERA_EPS {
        return None;
    }
    let (x, y) = k.distortion.apply(p.x / p.z, p.y / p.z);
    Some(Projection {
        u: k.cx + k.fx * x,
        v: k.cy + k.fy * y,
        depth: p.z,
    })
}

/// Camera-frame point seen at pixel (u, v) with optical-axis depth `depth`.
pub fn unproject_pixel(u: f64, v: f64, depth: f64, k: &CameraIntrinsics) -> Result<Vec3, GeometryError> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    Ok(k.ray(u, v) * depth)
}

/// Per-pixel depth along the optical axis, with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthImage {
    /// Entries flagged valid must be finite and positive.
    pub fn new(width: usize, height: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self, GeometryError> {
        if values.len() != width * height || valid.len() != width * height {
            return Err(GeometryError::DimensionMismatch { width, height });
        }
        if values
            .iter()
            .zip(&valid)
            .any(|(d, ok)| *ok && !(d.is_finite() && *d > 0.0))
        {
            return Err(GeometryError::NonFinite("valid depth entry"));
        }
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    /// Validity is derived from the values: finite and positive.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self, GeometryError> {
        let valid = values.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        Self::new(width, height, values, valid)
    }

    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn validity(&self) -> &[bool] {
        &self.valid
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, idx: usize) -> Option<f64> {
        self.valid[idx].then_some(self.values[idx])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn invalidate(&mut self, idx: usize) {
        self.valid[idx] = false;
        self.values[idx] = 0.0;
    }
}

/// IR amplitude image.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityImage {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl IntensityImage {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self, GeometryError> {
        if values.len() != width * height {
            return Err(GeometryError::DimensionMismatch { width, height });
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(GeometryError::NonFinite("intensity"));
        }
        Ok(Self { width, height, values })
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub labels: Option<Vec<u16>>,
    pub intensity: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self, GeometryError> {
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(GeometryError::NonFinite("point coordinates"));
        }
        Ok(Self {
            points,
            labels: None,
            intensity: None,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sub-cloud of the given point indices, carrying payloads along.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            intensity: self.intensity.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Points carrying `label`; empty if the cloud has no labels.
    pub fn with_label(&self, label: u16) -> PointCloud {
        let idx: Vec<usize> = match &self.labels {
            Some(l) => (0..l.len()).filter(|&i| l[i] == label).collect(),
            None => Vec::new(),
        };
        self.select(&idx)
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        let sum: Vec3 = self.points.iter().sum();
        Some(sum / self.points.len() as f64)
    }
}

pub fn transform_points(t: &RigidTransform, cloud: &PointCloud) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.transform_point(p)).collect(),
        labels: cloud.labels.clone(),
        intensity: cloud.intensity.clone(),
    }
}

/// One point per valid pixel, in row-major pixel order, together with the
/// source pixel index of each point.
pub fn depth_to_cloud_indexed(d: &DepthImage, k: &CameraIntrinsics) -> (PointCloud, Vec<usize>) {
    let mut points = Vec::with_capacity(d.valid_count());
    let mut pixels = Vec::with_capacity(d.valid_count());
    for y in 0..d.height {
        for x in 0..d.width {
            let idx = y * d.width + x;
            if let Some(z) = d.get(idx) {
                points.push(k.ray(x as f64, y as f64) * z);
                pixels.push(idx);
            }
        }
    }
    (
        PointCloud {
            points,
            labels: None,
            intensity: None,
        },
        pixels,
    )
}

pub fn depth_to_cloud(d: &DepthImage, k: &CameraIntrinsics) -> PointCloud {
    depth_to_cloud_indexed(d, k).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 176.0, 143.5, 352, 287, Distortion::default()).unwrap()
    }

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        let axis = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        RigidTransform::from_axis_angle(
            &axis,
            rng.random_range(-3.0..3.0),
            Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ),
        )
    }

    fn assert_close(a: &RigidTransform, b: &RigidTransform, tol: f64) {
        assert!((a.to_matrix4() - b.to_matrix4()).norm() < tol, "{a:?} vs {b:?}");
    }

    #[test]
    fn compose_identity_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_transform(&mut rng);
        assert_close(&compose(&t, &RigidTransform::identity()), &t, 1e-12);
        assert_close(&compose(&t, &invert(&t)), &RigidTransform::identity(), 1e-9);
    }

    #[test]
    fn compose_rotations_about_z() {
        let a = RigidTransform::rot_z(30f64.to_radians());
        let b = RigidTransform::rot_z(60f64.to_radians());
        assert_close(&(a * b), &RigidTransform::rot_z(90f64.to_radians()), 1e-12);
    }

    #[test]
    fn compose_applies_right_operand_first() {
        let a = RigidTransform::from_translation(Vec3::new(1.0, 0.0, 0.0));
        let b = RigidTransform::rot_z(std::f64::consts::FRAC_PI_2);
        let p = Vec3::new(1.0, 0.0, 0.0);
        let q = (a * b).transform_point(&p);
        assert!((q - Vec3::new(1.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn constructor_repairs_small_errors_and_rejects_large() {
        let mut r = *RigidTransform::rot_z(0.3).rotation();
        r[(0, 1)] += 1e-8;
        let t = RigidTransform::new(r, Vec3::zeros()).unwrap();
        assert!(orthonormality_error(t.rotation()) < 1e-12);
        r[(0, 1)] += 1e-3;
        assert!(RigidTransform::new(r, Vec3::zeros()).is_err());
        let reflect = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(reflect, Vec3::zeros()).is_err());
    }

    #[test]
    fn project_principal_axis_and_offset_point() {
        let k = intr();
        let p = project_point(&Vec3::new(0.0, 0.0, 2.0), &k).unwrap();
        assert_eq!((p.u, p.v, p.depth), (176.0, 143.5, 2.0));
        assert!(project_point(&Vec3::new(0.0, 0.0, -1.0), &k).is_none());
        let p = project_point(&Vec3::new(0.5, 0.0, 2.0), &k).unwrap();
        assert!((p.u - 201.0).abs() < 1e-12 && (p.v - 143.5).abs() < 1e-12);
    }

    #[test]
    fn unproject_principal_point() {
        let p = unproject_pixel(176.0, 143.5, 2.0, &intr()).unwrap();
        assert!((p - Vec3::new(0.0, 0.0, 2.0)).norm() < 1e-15);
        assert!(matches!(
            unproject_pixel(1.0, 1.0, 0.0, &intr()),
            Err(GeometryError::NonPositiveDepth(_))
        ));
    }

    fn round_trip_max_error(k: &CameraIntrinsics) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mut px, mut dz) = (0.0f64, 0.0f64);
        for _ in 0..1000 {
            let u = rng.random_range(0.0..k.width as f64 - 1.0);
            let v = rng.random_range(0.0..k.height as f64 - 1.0);
            let d = rng.random_range(0.2..8.0);
            let p = unproject_pixel(u, v, d, k).unwrap();
            let q = project_point(&p, k).unwrap();
            px = px.max((q.u - u).abs()).max((q.v - v).abs());
            dz = dz.max((q.depth - d).abs());
        }
        (px, dz)
    }

    #[test]
    fn round_trip_pinhole() {
        let (px, dz) = round_trip_max_error(&intr());
        assert!(px < 1e-6 && dz < 1e-9, "{px} {dz}");
    }

    #[test]
    fn round_trip_with_radial_distortion() {
        let mut k = intr();
        k.distortion.k1 = 0.1;
        let (px, dz) = round_trip_max_error(&k);
        assert!(px < 1e-6 && dz < 1e-9, "{px} {dz}");
        k.distortion = Distortion {
            k1: -0.05,
            k2: 0.01,
            k3: 0.0,
            p1: 1e-3,
            p2: -5e-4,
        };
        let (px, _) = round_trip_max_error(&k);
        assert!(px < 1e-6, "{px}");
    }

    #[test]
    fn depth_to_cloud_counts_and_plane() {
        let k = intr().resized(32, 24);
        let d = DepthImage::invalid(32, 24);
        assert!(depth_to_cloud(&d, &k).is_empty());
        let mut vals = vec![2.0; 32 * 24];
        vals[5] = f64::NAN;
        let d = DepthImage::from_values(32, 24, vals).unwrap();
        let c = depth_to_cloud(&d, &k);
        assert_eq!(c.len(), 32 * 24 - 1);
        assert!(c.points.iter().all(|p| p.z == 2.0));
    }

    #[test]
    fn matrix_rows_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_transform(&mut rng);
        let back = RigidTransform::from_rows(&t.to_rows(), 1e-6).unwrap();
        assert_close(&t, &back, 1e-12);
    }

    proptest! {
        #[test]
        fn group_laws(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b, c) = (random_transform(&mut rng), random_transform(&mut rng), random_transform(&mut rng));
            let left = (a * b) * c;
            let right = a * (b * c);
            prop_assert!((left.to_matrix4() - right.to_matrix4()).norm() < 1e-9);
            prop_assert!((a.inverse().inverse().to_matrix4() - a.to_matrix4()).norm() < 1e-9);
            prop_assert!(orthonormality_error(left.rotation()) < 1e-9);
        }

        #[test]
        fn transforms_preserve_distances(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_transform(&mut rng);
            let pts: Vec<Vec3> = (0..8).map(|_| Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))).collect();
            let cloud = PointCloud::new(pts).unwrap();
            let moved = transform_points(&t, &cloud);
            for i in 0..8 {
                for j in 0..8 {
                    let before = (cloud.points[i] - cloud.points[j]).norm();
                    let after = (moved.points[i] - moved.points[j]).norm();
                    prop_assert!((before - after).abs() < 1e-9);
                }
            }
        }
    }
}
