//! Camera-to-robot extrinsics.
//!
//! Joint-mounted cameras are solved from `A X = X B` motion pairs. Every
//! robot motion rotates about the vertical axis `n_z`, so only the rotation
//! and the translation component orthogonal to `n_z` are observable; the
//! remaining offset `alpha` along `n_z` is resolved by a one-degree-of-freedom
//! ICP against a reference model. The static BASE camera is chained from a
//! calibrated joint camera through simultaneous fixture observations.
//!
//! Conventions: `X` maps camera coordinates into the mounting-joint frame,
//! `T` maps the joint frame into the robot base frame, and `S` maps fixture
//! coordinates into the camera frame, so `T_i X S_i` is the (static) fixture
//! pose in the base frame for every observation `i`. With `A = T1⁻¹ T2` and
//! `B = S1 S2⁻¹` this gives `A X = X B`.

use crate::fiducials::FixtureObservation;
use crate::geometry::{nearest_rotation, rotation_angle, Mat3, PointCloud, RigidTransform, Vec3};
use crate::spatial::KdTree;
use nalgebra::{DMatrix, DVector, Matrix3x2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pairs whose joint rotation is smaller than this are ill-conditioned.
pub const MIN_PAIR_ROTATION: f64 = 5.0 * std::f64::consts::PI / 180.0;
/// `A X = X B` forces equal rotation angles for `A` and `B`.
pub const MAX_ANGLE_MISMATCH: f64 = 1.0 * std::f64::consts::PI / 180.0;
const AXIS_TOLERANCE: f64 = 1.0 * std::f64::consts::PI / 180.0;
const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("no usable motion pairs ({small_motion} below 5° rotation, {inconsistent} with A/B angle mismatch)")]
    NoUsablePairs { small_motion: usize, inconsistent: usize },
    #[error("motion pair {index} does not rotate about the robot axis ({deviation_deg:.2}° off)")]
    NotAboutAxis { index: usize, deviation_deg: f64 },
    #[error("hand-eye system is rank deficient beyond the axial offset (singular values {0:?})")]
    RankDeficient(Vec<f64>),
    #[error("observation lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("no ICP correspondences within {0} m")]
    NoCorrespondences(f64),
    #[error("no frame in which two cameras observe the fixture")]
    NoCommonObservations,
}

/// One robot pose: joint → base forward kinematics and the fixture pose in
/// the camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseObservation {
    pub joint_to_base: RigidTransform,
    pub fixture_to_camera: RigidTransform,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionPair {
    pub a: RigidTransform,
    pub b: RigidTransform,
}

impl MotionPair {
    pub fn from_observations(first: &PoseObservation, second: &PoseObservation) -> Self {
        Self {
            a: first.joint_to_base.inverse() * second.joint_to_base,
            b: first.fixture_to_camera * second.fixture_to_camera.inverse(),
        }
    }

    /// Squared Frobenius norm of `A X - X B` over the homogeneous matrices.
    pub fn residual(&self, x: &RigidTransform) -> f64 {
        let lhs = (self.a * *x).to_matrix4();
        let rhs = (*x * self.b).to_matrix4();
        (lhs - rhs).norm_squared()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairingMode {
    #[default]
    Consecutive,
    AllPairs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairRejection {
    SmallMotion,
    AngleMismatch,
}

#[derive(Clone, Debug)]
pub struct MotionPairs {
    pub pairs: Vec<MotionPair>,
    /// `(first, second, reason)` for every discarded observation pair.
    pub rejected: Vec<(usize, usize, PairRejection)>,
}

pub fn make_motion_pairs(obs: &[PoseObservation], mode: PairingMode) -> Result<MotionPairs, CalibrationError> {
    if obs.len() < 2 {
        return Err(CalibrationError::TooFewObservations {
            needed: 2,
            got: obs.len(),
        });
    }
    let index_pairs: Vec<(usize, usize)> = match mode {
        PairingMode::Consecutive => (1..obs.len()).map(|j| (j - 1, j)).collect(),
        PairingMode::AllPairs => (0..obs.len())
            .flat_map(|i| (i + 1..obs.len()).map(move |j| (i, j)))
            .collect(),
    };
    let mut pairs = Vec::new();
    let mut rejected = Vec::new();
    for (i, j) in index_pairs {
        let pair = MotionPair::from_observations(&obs[i], &obs[j]);
        let angle_a = pair.a.rotation_angle();
        if angle_a < MIN_PAIR_ROTATION {
            rejected.push((i, j, PairRejection::SmallMotion));
        } else if (angle_a - pair.b.rotation_angle()).abs() > MAX_ANGLE_MISMATCH {
            rejected.push((i, j, PairRejection::AngleMismatch));
        } else {
            pairs.push(pair);
        }
    }
    if pairs.is_empty() {
        let small_motion = rejected.iter().filter(|r| r.2 == PairRejection::SmallMotion).count();
        return Err(CalibrationError::NoUsablePairs {
            small_motion,
            inconsistent: rejected.len() - small_motion,
        });
    }
    Ok(MotionPairs { pairs, rejected })
}

fn rotation_axis(r: &Mat3) -> Vec3 {
    Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)])
}

fn check_axes(pairs: &[MotionPair], n_z: &Vec3) -> Result<(), CalibrationError> {
    for (index, p) in pairs.iter().enumerate() {
        let axis = rotation_axis(p.a.rotation());
        if axis.norm() < 1e-12 {
            continue;
        }
        let cos = axis.normalize().dot(n_z).abs().min(1.0);
        let deviation = cos.acos();
        if deviation > AXIS_TOLERANCE {
            return Err(CalibrationError::NotAboutAxis {
                index,
                deviation_deg: deviation.to_degrees(),
            });
        }
    }
    Ok(())
}

/// Two unit vectors spanning the plane orthogonal to `n`.
pub fn orthogonal_basis(n: &Vec3) -> Matrix3x2<f64> {
    let n = n.normalize();
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = n.cross(&helper).normalize();
    let v = n.cross(&u);
    Matrix3x2::from_columns(&[u, v])
}

/// Rotation of `X` from the joint rotation and translation equations solved
/// together as one vectorized linear system:
///
/// ```text
/// R_A R - R R_B = 0
/// R t_B - (R_A - I) t = t_A
/// ```
///
/// With every `A` rotating about `n_z`, the rotation equations alone leave a
/// rotation about `n_z` free; the translation equations of motions with
/// distinct rotation centers fix it. Two null directions remain by
/// construction: the axial offset `t ∝ n_z`, and scaling of the `n_z` row of
/// `R` (since `n_zᵀ t_A = 0` for planar motion). Both are truncated from the
/// least-squares solution and the result is projected onto SO(3), which
/// restores the scaled row. Any further rank loss is an error.
pub fn solve_rotation(pairs: &[MotionPair], n_z: &Vec3) -> Result<Mat3, CalibrationError> {
    if pairs.is_empty() {
        return Err(CalibrationError::Empty);
    }
    let n_z = n_z.normalize();
    check_axes(pairs, &n_z)?;
    let (m, rhs) = joint_system(pairs);
    let svd = m.svd(true, true);
    let u = svd.u.as_ref().expect("svd u");
    let v_t = svd.v_t.as_ref().expect("svd v_t");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    if sv.len() < 12 || sv[9] <= RANK_TOL * sv[0] {
        return Err(CalibrationError::RankDeficient(sv));
    }
    let mut x = DVector::<f64>::zeros(12);
    for &i in &order[..10] {
        let coeff = u.column(i).dot(&rhs) / svd.singular_values[i];
        x += v_t.row(i).transpose() * coeff;
    }
    let r = Mat3::from_fn(|i, j| x[3 * i + j]);
    Ok(nearest_rotation(&r))
}

fn joint_system(pairs: &[MotionPair]) -> (DMatrix<f64>, DVector<f64>) {
    let rows = 12 * pairs.len();
    let mut m = DMatrix::<f64>::zeros(rows, 12);
    let mut rhs = DVector::<f64>::zeros(rows);
    for (p, pair) in pairs.iter().enumerate() {
        let ra = pair.a.rotation();
        let rb = pair.b.rotation();
        let base = 12 * p;
        for i in 0..3 {
            for j in 0..3 {
                let row = base + 3 * i + j;
                for k in 0..3 {
                    // (R_A R)_ij = Σ_k A_ik R_kj ; (R R_B)_ij = Σ_k R_ik B_kj
                    m[(row, 3 * k + j)] += ra[(i, k)];
                    m[(row, 3 * i + k)] -= rb[(k, j)];
                }
            }
        }
        let tb = pair.b.translation();
        let ta = pair.a.translation();
        for i in 0..3 {
            let row = base + 9 + i;
            for j in 0..3 {
                m[(row, 3 * i + j)] = tb[j];
                let delta = if i == j { 1.0 } else { 0.0 };
                m[(row, 9 + j)] = -(ra[(i, j)] - delta);
            }
            rhs[row] = ta[i];
        }
    }
    (m, rhs)
}

/// Translation of `X` in the plane orthogonal to `n_z`, from
/// `(R_A - I) t = R_X t_B - t_A`.
pub fn solve_translation_perp(pairs: &[MotionPair], rotation: &Mat3, n_z: &Vec3) -> Result<Vec3, CalibrationError> {
    if pairs.is_empty() {
        return Err(CalibrationError::Empty);
    }
    let basis = orthogonal_basis(n_z);
    let mut ata = nalgebra::Matrix2::<f64>::zeros();
    let mut atb = Vector2::<f64>::zeros();
    for pair in pairs {
        let coeff = (pair.a.rotation() - Mat3::identity()) * basis;
        let target = rotation * pair.b.translation() - pair.a.translation();
        ata += coeff.transpose() * coeff;
        atb += coeff.transpose() * target;
    }
    let svd = ata.svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= RANK_TOL * smax.max(1e-300) {
        return Err(CalibrationError::RankDeficient(
            svd.singular_values.iter().copied().collect(),
        ));
    }
    let s = svd
        .solve(&atb, 0.0)
        .map_err(|_| CalibrationError::RankDeficient(vec![]))?;
    Ok(basis * s)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandEyeSolution {
    pub rotation: Mat3,
    /// Translation component orthogonal to `n_z`.
    pub t_perp: Vec3,
    pub n_z: Vec3,
    /// Offset along `n_z`, once resolved.
    pub alpha: Option<f64>,
    /// Mean `‖A X - X B‖²` over the pairs used.
    pub residual: f64,
}

impl HandEyeSolution {
    /// `X(alpha) = (R_X, t_perp + alpha n_z)`.
    pub fn transform_with(&self, alpha: f64) -> RigidTransform {
        RigidTransform::from_rotation_unchecked(self.rotation, self.t_perp + self.n_z * alpha)
    }

    /// `X` with the resolved offset, or `alpha = 0` when unresolved.
    pub fn transform(&self) -> RigidTransform {
        self.transform_with(self.alpha.unwrap_or(0.0))
    }
}

pub fn motion_residual(pairs: &[MotionPair], x: &RigidTransform) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|p| p.residual(x)).sum::<f64>() / pairs.len() as f64
}

pub fn solve_hand_eye(pairs: &[MotionPair], n_z: &Vec3) -> Result<HandEyeSolution, CalibrationError> {
    let n_z = n_z.normalize();
    let rotation = solve_rotation(pairs, &n_z)?;
    let t_perp = solve_translation_perp(pairs, &rotation, &n_z)?;
    // Remove round-off along the axis so t_perp · n_z is exactly tiny.
    let t_perp = t_perp - n_z * t_perp.dot(&n_z);
    let mut sol = HandEyeSolution {
        rotation,
        t_perp,
        n_z,
        alpha: None,
        residual: 0.0,
    };
    sol.residual = motion_residual(pairs, &sol.transform());
    Ok(sol)
}

fn chordal_mean(transforms: &[RigidTransform]) -> RigidTransform {
    let n = transforms.len() as f64;
    let rsum: Mat3 = transforms.iter().map(|t| *t.rotation()).sum();
    let tsum: Vec3 = transforms.iter().map(|t| *t.translation()).sum();
    RigidTransform::from_rotation_unchecked(nearest_rotation(&(rsum / n)), tsum / n)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseCameraSolution {
    /// BASE camera → robot base.
    pub camera_to_base: RigidTransform,
    /// RMS spread of the per-observation estimates about the mean.
    pub rms_translation: f64,
    pub rms_rotation: f64,
}

/// BASE camera extrinsics from simultaneous fixture observations by a
/// calibrated joint camera: `X_base = T_op X_op S_op S_base⁻¹` per
/// observation, averaged (chordal L2 rotation mean, arithmetic translation).
pub fn solve_base_camera(
    obs_joint: &[PoseObservation],
    obs_base: &[RigidTransform],
    x_joint: &RigidTransform,
) -> Result<BaseCameraSolution, CalibrationError> {
    if obs_joint.len() != obs_base.len() {
        return Err(CalibrationError::LengthMismatch(obs_joint.len(), obs_base.len()));
    }
    if obs_joint.is_empty() {
        return Err(CalibrationError::Empty);
    }
    let estimates: Vec<RigidTransform> = obs_joint
        .iter()
        .zip(obs_base)
        .map(|(o, s_base)| o.joint_to_base * *x_joint * o.fixture_to_camera * s_base.inverse())
        .collect();
    let mean = chordal_mean(&estimates);
    let n = estimates.len() as f64;
    let (mut sr, mut st) = (0.0, 0.0);
    for e in &estimates {
        let (a, d) = mean.distance_to(e);
        sr += a * a;
        st += d * d;
    }
    Ok(BaseCameraSolution {
        camera_to_base: mean,
        rms_translation: (st / n).sqrt(),
        rms_rotation: (sr / n).sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpConfig {
    pub gating_distance: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            gating_distance: 0.2,
            tolerance: 1e-6,
            max_iterations: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpResult {
    /// Offset along the axis added to `X_init`'s translation.
    pub alpha: f64,
    pub iterations: usize,
    pub rms: f64,
    pub correspondences: usize,
}

/// One-DOF point-to-point ICP along `axis`.
///
/// `camera_cloud` is in the camera frame; `reference_model` must already be
/// expressed in the mounting frame `X` maps into. Each iteration pairs every
/// `X_init p + alpha axis` with its nearest reference point (gated) and sets
/// `alpha` to the mean axial offset of the pairs.
pub fn icp_refine(
    camera_cloud: &PointCloud,
    reference_model: &PointCloud,
    x_init: &RigidTransform,
    axis: &Vec3,
    config: &IcpConfig,
) -> Result<IcpResult, CalibrationError> {
    if camera_cloud.is_empty() || reference_model.is_empty() {
        return Err(CalibrationError::Empty);
    }
    let axis = axis.normalize();
    let tree = KdTree::new(&reference_model.points);
    let moved: Vec<Vec3> = camera_cloud.points.iter().map(|p| x_init.transform_point(p)).collect();
    let gate2 = config.gating_distance * config.gating_distance;
    let mut alpha = 0.0;
    let mut result = IcpResult {
        alpha,
        iterations: 0,
        rms: f64::NAN,
        correspondences: 0,
    };
    for it in 1..=config.max_iterations {
        let shift = axis * alpha;
        let (mut sum, mut sq, mut count) = (0.0, 0.0, 0usize);
        for p in &moved {
            let q = p + shift;
            let (j, d2) = tree.nearest(&q).expect("non-empty tree");
            if d2 <= gate2 {
                sum += (tree.point(j) - p).dot(&axis);
                sq += d2;
                count += 1;
            }
        }
        if count == 0 {
            return Err(CalibrationError::NoCorrespondences(config.gating_distance));
        }
        let next = sum / count as f64;
        let delta = next - alpha;
        alpha = next;
        result = IcpResult {
            alpha,
            iterations: it,
            rms: (sq / count as f64).sqrt(),
            correspondences: count,
        };
        if delta.abs() < config.tolerance {
            break;
        }
    }
    Ok(result)
}

/// Unconstrained 6-DOF point-to-point ICP warm-started at `x_init`, for
/// comparison with the axial refinement.
pub fn icp_full(
    camera_cloud: &PointCloud,
    reference_model: &PointCloud,
    x_init: &RigidTransform,
    config: &IcpConfig,
) -> Result<RigidTransform, CalibrationError> {
    if camera_cloud.is_empty() || reference_model.is_empty() {
        return Err(CalibrationError::Empty);
    }
    let tree = KdTree::new(&reference_model.points);
    let gate2 = config.gating_distance * config.gating_distance;
    let mut x = *x_init;
    for _ in 0..config.max_iterations {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for p in &camera_cloud.points {
            let q = x.transform_point(p);
            let (j, d2) = tree.nearest(&q).expect("non-empty tree");
            if d2 <= gate2 {
                src.push(q);
                dst.push(*tree.point(j));
            }
        }
        if src.len() < 3 {
            return Err(CalibrationError::NoCorrespondences(config.gating_distance));
        }
        let step = kabsch(&src, &dst);
        x = step * x;
        if step.rotation_angle() < 1e-9 && step.translation().norm() < config.tolerance {
            break;
        }
    }
    Ok(x)
}

/// Least-squares rigid motion taking `src` onto `dst`.
pub fn kabsch(src: &[Vec3], dst: &[Vec3]) -> RigidTransform {
    let n = src.len() as f64;
    let cs: Vec3 = src.iter().sum::<Vec3>() / n;
    let cd: Vec3 = dst.iter().sum::<Vec3>() / n;
    let mut h = Mat3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (d - cd) * (s - cs).transpose();
    }
    let r = nearest_rotation(&h);
    RigidTransform::from_rotation_unchecked(r, cd - r * cs)
}

/// One camera in one synchronized frame for TRE evaluation.
#[derive(Clone, Debug)]
pub struct TreView {
    pub camera: usize,
    /// Calibrated camera → base transform at this frame (`T X`, or `X_base`).
    pub camera_to_base: RigidTransform,
    pub observation: Option<FixtureObservation>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TreStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl TreStats {
    fn from_samples(samples: &[f64]) -> Self {
        let count = samples.len();
        if count == 0 {
            return Self::default();
        }
        let mean = samples.iter().sum::<f64>() / count as f64;
        let var = if count > 1 {
            samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (count - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            std: var.sqrt(),
            count,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairTre {
    pub cameras: (usize, usize),
    pub stats: TreStats,
}

/// Target registration error as a fraction of object-camera distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreReport {
    pub pairs: Vec<PairTre>,
    pub overall: TreStats,
}

impl TreReport {
    /// Statistics for a camera pair in either order.
    pub fn pair(&self, a: usize, b: usize) -> Option<TreStats> {
        let key = (a.min(b), a.max(b));
        self.pairs.iter().find(|p| p.cameras == key).map(|p| p.stats)
    }
}

/// For every camera pair observing the fixture in the same frame, each
/// sphere center seen by one camera is carried through the robot base into
/// the other camera; the distance to the other camera's own estimate is
/// divided by the mean of the two object-camera distances.
pub fn compute_tre(frames: &[Vec<TreView>]) -> Result<TreReport, CalibrationError> {
    let mut per_pair: std::collections::BTreeMap<(usize, usize), Vec<f64>> = Default::default();
    for frame in frames {
        let seen: Vec<&TreView> = frame.iter().filter(|v| v.observation.is_some()).collect();
        for (ia, a) in seen.iter().enumerate() {
            for b in &seen[ia + 1..] {
                let (a, b) = if a.camera <= b.camera { (*a, *b) } else { (*b, *a) };
                let oa = a.observation.as_ref().expect("filtered");
                let ob = b.observation.as_ref().expect("filtered");
                let a_to_b = b.camera_to_base.inverse() * a.camera_to_base;
                let samples = per_pair.entry((a.camera, b.camera)).or_default();
                for (ca, cb) in oa.centers().iter().zip(ob.centers().iter()) {
                    let residual = (a_to_b.transform_point(ca) - cb).norm();
                    let distance = 0.5 * (ca.norm() + cb.norm());
                    samples.push(residual / distance);
                }
            }
        }
    }
    if per_pair.is_empty() {
        return Err(CalibrationError::NoCommonObservations);
    }
    let all: Vec<f64> = per_pair.values().flatten().copied().collect();
    Ok(TreReport {
        pairs: per_pair
            .iter()
            .map(|(k, v)| PairTre {
                cameras: *k,
                stats: TreStats::from_samples(v),
            })
            .collect(),
        overall: TreStats::from_samples(&all),
    })
}

/// Angle between two rotations (radians).
pub fn rotation_error(a: &Mat3, b: &Mat3) -> f64 {
    rotation_angle(&(a.transpose() * b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_transform(rng: &mut ChaCha8Rng, t_scale: f64) -> RigidTransform {
        RigidTransform::from_axis_angle(
            &Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
            rng.random_range(-3.0..3.0),
            Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ) * t_scale,
        )
    }

    /// Planar joint motion: rotation about z plus a horizontal displacement.
    fn joint_pose(theta: f64, dx: f64, dy: f64) -> RigidTransform {
        RigidTransform::from_translation(Vec3::new(dx, dy, 0.5)) * RigidTransform::rot_z(theta)
    }

    fn observations(x: &RigidTransform, poses: &[(f64, f64, f64)], rng: &mut ChaCha8Rng) -> Vec<PoseObservation> {
        let fixture = random_transform(rng, 2.0);
        poses
            .iter()
            .map(|&(th, dx, dy)| {
                let t = joint_pose(th, dx, dy);
                PoseObservation {
                    joint_to_base: t,
                    fixture_to_camera: (t * *x).inverse() * fixture,
                }
            })
            .collect()
    }

    const POSES: [(f64, f64, f64); 4] = [(0.0, 0.0, 0.0), (0.5, 0.2, -0.1), (-0.4, -0.1, 0.25), (0.9, 0.3, 0.1)];

    #[test]
    fn zero_motion_pair_is_discarded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = observations(
            &RigidTransform::identity(),
            &[(0.3, 0.0, 0.0), (0.3, 0.0, 0.0)],
            &mut rng,
        );
        assert_eq!(
            make_motion_pairs(&obs, PairingMode::Consecutive).unwrap_err(),
            CalibrationError::NoUsablePairs {
                small_motion: 1,
                inconsistent: 0
            }
        );
    }

    #[test]
    fn pairs_satisfy_hand_eye_equation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_transform(&mut rng, 0.5);
        let obs = observations(&x, &POSES[..3], &mut rng);
        let all = make_motion_pairs(&obs, PairingMode::AllPairs).unwrap();
        assert_eq!(all.pairs.len(), 3);
        for p in &all.pairs {
            assert!(p.residual(&x).sqrt() < 1e-9);
        }
        assert_eq!(
            make_motion_pairs(&obs, PairingMode::Consecutive).unwrap().pairs.len(),
            2
        );
    }

    #[test]
    fn identity_mount_recovers_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obs = observations(&RigidTransform::identity(), &POSES, &mut rng);
        let pairs = make_motion_pairs(&obs, PairingMode::AllPairs).unwrap().pairs;
        let sol = solve_hand_eye(&pairs, &Vec3::z()).unwrap();
        assert!((sol.rotation - Mat3::identity()).norm() < 1e-9);
        assert!(sol.t_perp.norm() < 1e-9);
    }

    #[test]
    fn random_mount_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let x = random_transform(&mut rng, 0.5);
            let obs = observations(&x, &POSES, &mut rng);
            let pairs = make_motion_pairs(&obs, PairingMode::AllPairs).unwrap().pairs;
            let r = solve_rotation(&pairs, &Vec3::z()).unwrap();
            assert!(rotation_error(&r, x.rotation()) < 1e-7);
            let t = solve_translation_perp(&pairs, &r, &Vec3::z()).unwrap();
            let expected = Vec3::new(x.translation().x, x.translation().y, 0.0);
            assert!((t - expected).norm() < 1e-7);
        }
    }

    #[test]
    fn translation_perp_drops_axial_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = RigidTransform::from_axis_angle(&Vec3::new(0.3, -0.2, 1.0), 0.7, Vec3::new(0.1, 0.2, 0.5));
        let obs = observations(&x, &POSES, &mut rng);
        let pairs = make_motion_pairs(&obs, PairingMode::AllPairs).unwrap().pairs;
        let t = solve_translation_perp(&pairs, x.rotation(), &Vec3::z()).unwrap();
        assert!((t - Vec3::new(0.1, 0.2, 0.0)).norm() < 1e-7);
    }

    #[test]
    fn two_load_bearing_pairs_are_the_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_transform(&mut rng, 0.5);
        // A single pair (even a 90° one) leaves the rotation about n_z free.
        let obs = observations(
            &x,
            &[(0.0, 0.0, 0.0), (std::f64::consts::FRAC_PI_2, 0.2, 0.1)],
            &mut rng,
        );
        let one = make_motion_pairs(&obs, PairingMode::Consecutive).unwrap().pairs;
        assert!(matches!(
            solve_rotation(&one, &Vec3::z()),
            Err(CalibrationError::RankDeficient(_))
        ));
        let obs = observations(
            &x,
            &[
                (0.0, 0.0, 0.0),
                (std::f64::consts::FRAC_PI_2, 0.2, 0.1),
                (-0.6, -0.2, 0.3),
            ],
            &mut rng,
        );
        let two = make_motion_pairs(&obs, PairingMode::Consecutive).unwrap().pairs;
        let r = solve_rotation(&two, &Vec3::z()).unwrap();
        assert!(rotation_error(&r, x.rotation()) < 1e-7);
    }

    #[test]
    fn pure_rotation_about_one_line_is_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_transform(&mut rng, 0.5);
        let obs = observations(
            &x,
            &[(0.0, 0.0, 0.0), (0.5, 0.0, 0.0), (1.0, 0.0, 0.0), (-0.7, 0.0, 0.0)],
            &mut rng,
        );
        let pairs = make_motion_pairs(&obs, PairingMode::AllPairs).unwrap().pairs;
        assert!(matches!(
            solve_rotation(&pairs, &Vec3::z()),
            Err(CalibrationError::RankDeficient(_))
        ));
    }

    #[test]
    fn rotation_off_axis_rejected() {
        let pair = MotionPair {
            a: RigidTransform::from_axis_angle(&Vec3::x(), 0.5, Vec3::zeros()),
            b: RigidTransform::from_axis_angle(&Vec3::x(), 0.5, Vec3::zeros()),
        };
        assert!(matches!(
            solve_rotation(&[pair], &Vec3::z()),
            Err(CalibrationError::NotAboutAxis { .. })
        ));
    }

    #[test]
    fn axial_offset_is_unobservable() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_transform(&mut rng, 0.5);
        let obs = observations(&x, &POSES, &mut rng);
        let pairs = make_motion_pairs(&obs, PairingMode::AllPairs).unwrap().pairs;
        let sol = solve_hand_eye(&pairs, &Vec3::z()).unwrap();
        assert!(sol.t_perp.dot(&sol.n_z).abs() < 1e-9);
        for candidate in [sol.transform(), random_transform(&mut rng, 0.5)] {
            for alpha in [-1.0, -0.07, 0.3, 2.5] {
                let shifted = candidate.with_translation(candidate.translation() + Vec3::z() * alpha);
                for p in &pairs {
                    assert!((p.residual(&shifted) - p.residual(&candidate)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn base_camera_single_observation_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x_op = random_transform(&mut rng, 0.5);
        let x_base = random_transform(&mut rng, 0.5);
        let fixture = random_transform(&mut rng, 2.0);
        let t = joint_pose(0.3, 0.1, 0.0);
        let obs = PoseObservation {
            joint_to_base: t,
            fixture_to_camera: (t * x_op).inverse() * fixture,
        };
        let s_base = x_base.inverse() * fixture;
        let sol = solve_base_camera(&[obs], &[s_base], &x_op).unwrap();
        let (a, d) = sol.camera_to_base.distance_to(&x_base);
        assert!(a < 1e-12 && d < 1e-12);
        assert_eq!(
            solve_base_camera(&[obs, obs], &[s_base], &x_op).unwrap_err(),
            CalibrationError::LengthMismatch(2, 1)
        );
    }

    fn slab_cloud(z: f64, spacing: f64) -> PointCloud {
        let mut pts = Vec::new();
        let n = (1.0 / spacing) as i32;
        for i in 0..=n {
            for j in 0..=n {
                pts.push(Vec3::new(i as f64 * spacing, j as f64 * spacing, z));
            }
        }
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn icp_aligned_and_shifted() {
        let reference = slab_cloud(0.0, 0.01);
        let camera = slab_cloud(0.0, 0.013);
        let cfg = IcpConfig::default();
        let r = icp_refine(&camera, &reference, &RigidTransform::identity(), &Vec3::z(), &cfg).unwrap();
        assert!(r.alpha.abs() < 1e-9);
        let shifted = slab_cloud(0.07, 0.01);
        let r = icp_refine(&camera, &shifted, &RigidTransform::identity(), &Vec3::z(), &cfg).unwrap();
        assert!((r.alpha - 0.07).abs() < 1e-6, "{}", r.alpha);
    }

    #[test]
    fn icp_disjoint_clouds_fail_gating() {
        let reference = slab_cloud(0.0, 0.05);
        let far = transform_cloud(&slab_cloud(0.0, 0.05), Vec3::new(5.0, 0.0, 0.0));
        let err = icp_refine(
            &far,
            &reference,
            &RigidTransform::identity(),
            &Vec3::z(),
            &IcpConfig::default(),
        )
        .unwrap_err();
        assert_eq!(err, CalibrationError::NoCorrespondences(0.2));
    }

    fn transform_cloud(c: &PointCloud, t: Vec3) -> PointCloud {
        PointCloud::new(c.points.iter().map(|p| p + t).collect()).unwrap()
    }

    #[test]
    fn full_icp_recovers_small_offset() {
        let mut pts = Vec::new();
        for i in 0..20 {
            for j in 0..20 {
                let (x, y) = (i as f64 * 0.02, j as f64 * 0.02);
                pts.push(Vec3::new(x, y, 0.1 * (3.0 * x).sin() + 0.05 * (5.0 * y).cos()));
            }
        }
        let reference = PointCloud::new(pts).unwrap();
        let offset = RigidTransform::from_axis_angle(&Vec3::z(), 0.01, Vec3::new(0.005, -0.004, 0.003));
        let camera = crate::geometry::transform_points(&offset.inverse(), &reference);
        let x = icp_full(&camera, &reference, &RigidTransform::identity(), &IcpConfig::default()).unwrap();
        let (a, d) = x.distance_to(&offset);
        assert!(a < 1e-6 && d < 1e-6, "{a} {d}");
    }

    fn tre_frame(calibs: &[RigidTransform], truth: &[RigidTransform], fixture: &RigidTransform) -> Vec<TreView> {
        let pattern = crate::fiducials::FiducialPattern::default();
        calibs
            .iter()
            .zip(truth)
            .enumerate()
            .map(|(camera, (calib, true_pose))| {
                let centers = pattern.placed(&(true_pose.inverse() * *fixture));
                let sphere = |c: Vec3| crate::fiducials::SphereFitResult {
                    center: c,
                    radius: 0.1,
                    rms_residual: 0.0,
                    inlier_count: 100,
                };
                TreView {
                    camera,
                    camera_to_base: *calib,
                    observation: Some(FixtureObservation {
                        fixture_to_camera: true_pose.inverse() * *fixture,
                        spheres: centers.map(sphere),
                    }),
                }
            })
            .collect()
    }

    #[test]
    fn tre_perfect_is_zero_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let truth: Vec<RigidTransform> = (0..4).map(|_| random_transform(&mut rng, 1.0)).collect();
        let fixture = random_transform(&mut rng, 1.0);
        let report = compute_tre(&[tre_frame(&truth, &truth, &fixture)]).unwrap();
        assert!(report.overall.mean < 1e-7);
        assert_eq!(report.pairs.len(), 6);
        assert_eq!(report.pair(1, 3), report.pair(3, 1));
    }

    #[test]
    fn tre_of_translation_error_matches_ratio() {
        // Two cameras 2 m from the fixture centers; one calibrated 5 cm off.
        let pattern = crate::fiducials::FiducialPattern::default();
        let fixture = RigidTransform::identity();
        let centroid: Vec3 = pattern.centers.iter().sum::<Vec3>() / 4.0;
        let cam = |dir: Vec3| RigidTransform::look_at(centroid + dir * 2.0, centroid, Vec3::z()).unwrap();
        let truth = [
            cam(Vec3::new(1.0, 0.0, 0.2).normalize()),
            cam(Vec3::new(0.0, -1.0, 0.2).normalize()),
        ];
        let calibs = [
            truth[0],
            truth[1].with_translation(truth[1].translation() + Vec3::new(0.05, 0.0, 0.0)),
        ];
        let report = compute_tre(&[tre_frame(&calibs, &truth, &fixture)]).unwrap();
        assert!((report.overall.mean - 0.025).abs() < 0.002, "{}", report.overall.mean);
    }

    #[test]
    fn tre_needs_common_observations() {
        let view = TreView {
            camera: 0,
            camera_to_base: RigidTransform::identity(),
            observation: None,
        };
        assert_eq!(
            compute_tre(&[vec![view]]).unwrap_err(),
            CalibrationError::NoCommonObservations
        );
    }
}
