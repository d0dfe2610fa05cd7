//! Four-sphere calibration fixture: sphere fitting, fixture detection in a
//! camera point cloud and the fixture's local frame.

use crate::geometry::{GeometryError, Mat3, PointCloud, RigidTransform, Vec3};
use crate::spatial::KdTree;
use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_SPHERE_POINTS: usize = 10;
const GN_MAX_ITERS: usize = 50;
const GN_STEP_TOL: f64 = 1e-10;
const MIN_TETRA_VOLUME: f64 = 1e-6;
const MIN_DISTANCE_GAP: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FiducialError {
    #[error("sphere fit needs at least {MIN_SPHERE_POINTS} points, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate point set for sphere fit (condition {0:.3e})")]
    SingularFit(f64),
    #[error("fixture centers are coplanar (tetrahedron volume {0:.3e} m^3)")]
    Coplanar(f64),
    #[error("invalid fiducial pattern: {0}")]
    InvalidPattern(String),
    #[error("found {0} sphere candidates, need 4")]
    TooFewSpheres(usize),
    #[error("ambiguous sphere correspondence (best cost {best:.4} m, runner-up {second:.4} m)")]
    AmbiguousCorrespondence { best: f64, second: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphereFitResult {
    pub center: Vec3,
    pub radius: f64,
    pub rms_residual: f64,
    pub inlier_count: usize,
}

/// Sphere fit with the cost after every accepted Gauss–Newton step
/// (`costs[0]` is the cost of the algebraic initialization).
#[derive(Clone, Debug)]
pub struct SphereFitTrace {
    pub fit: SphereFitResult,
    pub costs: Vec<f64>,
}

/// Least-squares sphere fit: algebraic linear solution refined by
/// Gauss–Newton on the geometric residual `|p - c| - r`. With
/// `fixed_radius` only the center is estimated.
pub fn fit_sphere(points: &[Vec3], fixed_radius: Option<f64>) -> Result<SphereFitResult, FiducialError> {
    fit_sphere_traced(points, fixed_radius).map(|t| t.fit)
}

pub fn fit_sphere_traced(points: &[Vec3], fixed_radius: Option<f64>) -> Result<SphereFitTrace, FiducialError> {
    if points.len() < MIN_SPHERE_POINTS {
        return Err(FiducialError::TooFewPoints(points.len()));
    }
    let n = points.len() as f64;
    let mean: Vec3 = points.iter().sum::<Vec3>() / n;
    let scale = points
        .iter()
        .map(|p| (p - mean).norm())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);

    // Algebraic fit on centered, scaled points:
    // |q|^2 = 2 c·q + (r^2 - |c|^2), linear in (c, d).
    let mut ata = Matrix4::<f64>::zeros();
    let mut atb = Vector4::<f64>::zeros();
    for p in points {
        let q = (p - mean) / scale;
        let row = Vector4::new(2.0 * q.x, 2.0 * q.y, 2.0 * q.z, 1.0);
        ata += row * row.transpose();
        atb += row * q.norm_squared();
    }
    let svd = ata.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = smin / smax;
    if !(cond > 1e-10) {
        return Err(FiducialError::SingularFit(cond));
    }
    let sol = svd.solve(&atb, 0.0).map_err(|_| FiducialError::SingularFit(cond))?;
    let c0 = Vec3::new(sol[0], sol[1], sol[2]);
    let r0 = (sol[3] + c0.norm_squared()).max(0.0).sqrt();
    let mut center = mean + c0 * scale;
    let mut radius = fixed_radius.unwrap_or(r0 * scale);

    let cost = |c: &Vec3, r: f64| -> f64 { points.iter().map(|p| ((p - c).norm() - r).powi(2)).sum::<f64>() };
    let mut current = cost(&center, radius);
    let mut costs = vec![current];
    let free = fixed_radius.is_none();
    let dim = if free { 4 } else { 3 };

    for _ in 0..GN_MAX_ITERS {
        let mut jtj = DMatrix::<f64>::zeros(dim, dim);
        let mut jtr = DVector::<f64>::zeros(dim);
        for p in points {
            let diff = p - center;
            let dist = diff.norm();
            if dist == 0.0 {
                continue;
            }
            let res = dist - radius;
            let g = -diff / dist;
            let mut row = [g.x, g.y, g.z, -1.0];
            if !free {
                row[3] = 0.0;
            }
            for i in 0..dim {
                jtr[i] += row[i] * res;
                for j in 0..dim {
                    jtj[(i, j)] += row[i] * row[j];
                }
            }
        }
        let Some(step) = jtj.clone().lu().solve(&(-jtr)) else {
            break;
        };
        let dc = Vec3::new(step[0], step[1], step[2]);
        let dr = if free { step[3] } else { 0.0 };
        // Backtrack so the cost never increases.
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-6 {
            let c_try = center + dc * t;
            let r_try = radius + dr * t;
            let cost_try = cost(&c_try, r_try);
            if cost_try <= current {
                center = c_try;
                radius = r_try;
                current = cost_try;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        costs.push(current);
        if (dc.norm_squared() + dr * dr).sqrt() * t < GN_STEP_TOL {
            break;
        }
    }

    if !(radius > 0.0) || !radius.is_finite() {
        return Err(FiducialError::SingularFit(cond));
    }
    let rms = (current / n).sqrt();
    let gate = 3.0 * rms;
    let inlier_count = points
        .iter()
        .filter(|p| ((*p - center).norm() - radius).abs() <= gate)
        .count();
    Ok(SphereFitTrace {
        fit: SphereFitResult {
            center,
            radius,
            rms_residual: rms,
            inlier_count,
        },
        costs,
    })
}

/// Sphere centers of the fixture in its own frame, in label order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FiducialPattern {
    pub centers: [Vec3; 4],
    pub sphere_radius: f64,
}

impl Default for FiducialPattern {
    fn default() -> Self {
        Self {
            centers: [
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(0.53, 0.0, 0.0),
                Vec3::new(0.06, 0.42, 0.0),
                Vec3::new(0.16, 0.30, 0.33),
            ],
            sphere_radius: 0.1,
        }
    }
}

/// The six center pairs, in fixed order.
pub const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

fn pair_distances(c: &[Vec3; 4]) -> [f64; 6] {
    PAIRS.map(|(i, j)| (c[i] - c[j]).norm())
}

fn tetra_volume(c: &[Vec3; 4]) -> f64 {
    Mat3::from_columns(&[c[1] - c[0], c[2] - c[0], c[3] - c[0]])
        .determinant()
        .abs()
        / 6.0
}

impl FiducialPattern {
    pub fn new(centers: [Vec3; 4], sphere_radius: f64) -> Result<Self, FiducialError> {
        let p = Self { centers, sphere_radius };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), FiducialError> {
        if !(self.sphere_radius > 0.0) {
            return Err(FiducialError::InvalidPattern("sphere radius must be positive".into()));
        }
        let vol = tetra_volume(&self.centers);
        if vol <= MIN_TETRA_VOLUME {
            return Err(FiducialError::Coplanar(vol));
        }
        let mut d = self.distances().to_vec();
        d.sort_by(f64::total_cmp);
        if d.windows(2).any(|w| w[1] - w[0] <= MIN_DISTANCE_GAP) {
            return Err(FiducialError::InvalidPattern(
                "pairwise distances must differ by more than 2 cm".into(),
            ));
        }
        Ok(())
    }

    pub fn distances(&self) -> [f64; 6] {
        pair_distances(&self.centers)
    }

    /// Pattern centers placed with `fixture_to_frame`.
    pub fn placed(&self, fixture_to_frame: &RigidTransform) -> [Vec3; 4] {
        self.centers.map(|c| fixture_to_frame.transform_point(&c))
    }
}

/// Detected fixture: `fixture_to_camera` maps fixture-local coordinates
/// into the camera frame; `spheres` are in pattern label order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureObservation {
    pub fixture_to_camera: RigidTransform,
    pub spheres: [SphereFitResult; 4],
}

impl FixtureObservation {
    pub fn centers(&self) -> [Vec3; 4] {
        self.spheres.map(|s| s.center)
    }
}

/// Local frame of four labeled centers: origin at the first, x toward the
/// second, z along (c2 - c1) x (c3 - c1). Returned as the frame's pose in the
/// input coordinates (frame -> input).
pub fn build_fixture_frame(centers: &[Vec3; 4]) -> Result<RigidTransform, FiducialError> {
    let vol = tetra_volume(centers);
    if vol <= MIN_TETRA_VOLUME {
        return Err(FiducialError::Coplanar(vol));
    }
    let e1 = centers[1] - centers[0];
    let e2 = centers[2] - centers[0];
    let x = e1.normalize();
    let z = e1.cross(&e2).normalize();
    let y = z.cross(&x);
    Ok(RigidTransform::from_rotation_unchecked(
        Mat3::from_columns(&[x, y, z]),
        centers[0],
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    /// Euclidean clustering linkage radius (m).
    pub cluster_radius: f64,
    /// Accepted relative deviation of a fitted radius from the pattern's.
    pub radius_tolerance: f64,
    /// Sphere fits with a larger RMS residual are rejected (m).
    pub max_rms_residual: f64,
    /// Two assignments whose summed distance errors differ by less than this
    /// are ambiguous (m).
    pub ambiguity_margin: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            cluster_radius: 0.05,
            radius_tolerance: 0.2,
            max_rms_residual: 0.05,
            ambiguity_margin: 0.005,
        }
    }
}

/// Connected components under the `radius` linkage, each sorted by index;
/// components are ordered by their smallest index.
pub fn euclidean_clusters(points: &[Vec3], radius: f64, min_size: usize) -> Vec<Vec<usize>> {
    let tree = KdTree::new(points);
    let mut label = vec![usize::MAX; points.len()];
    let mut clusters = Vec::new();
    for seed in 0..points.len() {
        if label[seed] != usize::MAX {
            continue;
        }
        let id = clusters.len();
        label[seed] = id;
        let mut members = vec![seed];
        let mut head = 0;
        while head < members.len() {
            let i = members[head];
            head += 1;
            for j in tree.within(&points[i], radius) {
                if label[j] == usize::MAX {
                    label[j] = id;
                    members.push(j);
                }
            }
        }
        members.sort_unstable();
        clusters.push(members);
    }
    clusters.retain(|c| c.len() >= min_size);
    clusters
}

fn lexicographic(a: &Vec3, b: &Vec3) -> std::cmp::Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)).then(a.z.total_cmp(&b.z))
}

/// Segments sphere-shaped clusters, matches them to the pattern by pairwise
/// distances and returns the fixture pose in the camera frame.
pub fn detect_fixture(
    cloud: &PointCloud,
    pattern: &FiducialPattern,
    config: &DetectionConfig,
) -> Result<FixtureObservation, FiducialError> {
    let clusters = euclidean_clusters(&cloud.points, config.cluster_radius, MIN_SPHERE_POINTS);
    let mut candidates: Vec<SphereFitResult> = Vec::new();
    for members in clusters {
        // Canonical point order makes the fit independent of input order.
        let mut pts: Vec<Vec3> = members.iter().map(|&i| cloud.points[i]).collect();
        pts.sort_by(lexicographic);
        let Ok(free) = fit_sphere(&pts, None) else {
            continue;
        };
        let rel = (free.radius - pattern.sphere_radius).abs() / pattern.sphere_radius;
        if rel > config.radius_tolerance || free.rms_residual > config.max_rms_residual {
            continue;
        }
        if let Ok(fixed) = fit_sphere(&pts, Some(pattern.sphere_radius)) {
            if fixed.rms_residual <= config.max_rms_residual {
                candidates.push(fixed);
            }
        }
    }
    if candidates.len() < 4 {
        return Err(FiducialError::TooFewSpheres(candidates.len()));
    }
    candidates.sort_by(|a, b| lexicographic(&a.center, &b.center));

    let target = pattern.distances();
    let mut best: Option<(f64, [usize; 4])> = None;
    let mut second = f64::INFINITY;
    for assignment in injections(candidates.len()) {
        let c = assignment.map(|i| candidates[i].center);
        let cost: f64 = pair_distances(&c).iter().zip(&target).map(|(a, b)| (a - b).abs()).sum();
        match best {
            Some((b, _)) if cost >= b => second = second.min(cost),
            _ => {
                if let Some((b, _)) = best {
                    second = second.min(b);
                }
                best = Some((cost, assignment));
            }
        }
    }
    let (best_cost, assignment) = best.expect("at least one assignment");
    if second - best_cost < config.ambiguity_margin {
        return Err(FiducialError::AmbiguousCorrespondence {
            best: best_cost,
            second,
        });
    }
    let spheres = assignment.map(|i| candidates[i]);
    let observed = build_fixture_frame(&spheres.map(|s| s.center))?;
    let model = build_fixture_frame(&pattern.centers)?;
    Ok(FixtureObservation {
        fixture_to_camera: observed * model.inverse(),
        spheres,
    })
}

/// All ordered selections of 4 distinct indices from `0..n`.
fn injections(n: usize) -> Vec<[usize; 4]> {
    let mut out = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if b == a {
                continue;
            }
            for c in 0..n {
                if c == a || c == b {
                    continue;
                }
                for d in 0..n {
                    if d != a && d != b && d != c {
                        out.push([a, b, c, d]);
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn sphere_samples(center: Vec3, r: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                let v = loop {
                    let v = Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    );
                    let n = v.norm();
                    if n > 0.1 && n <= 1.0 {
                        break v / n;
                    }
                };
                center + v * r
            })
            .collect()
    }

    #[test]
    fn exact_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = sphere_samples(Vec3::new(1.0, 2.0, 3.0), 0.1, 500, &mut rng);
        let fit = fit_sphere(&pts, None).unwrap();
        assert!((fit.center - Vec3::new(1.0, 2.0, 3.0)).norm() < 1e-9);
        assert!((fit.radius - 0.1).abs() < 1e-9);
        assert!(fit.rms_residual < 1e-9);
        assert_eq!(fit.inlier_count, 500);
    }

    #[test]
    fn noisy_fit_center_error_95th_percentile() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = Normal::new(0.0, 0.002).unwrap();
        let truth = Vec3::new(1.0, 2.0, 3.0);
        let mut errors: Vec<f64> = (0..200)
            .map(|_| {
                let pts: Vec<Vec3> = sphere_samples(truth, 0.1, 500, &mut rng)
                    .into_iter()
                    .map(|p| p + Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)))
                    .collect();
                (fit_sphere(&pts, None).unwrap().center - truth).norm()
            })
            .collect();
        errors.sort_by(f64::total_cmp);
        assert!(errors[189] < 1e-3, "p95 {}", errors[189]);
    }

    #[test]
    fn coplanar_points_are_singular() {
        let pts: Vec<Vec3> = (0..10)
            .map(|i| {
                let a = i as f64 * 0.6;
                Vec3::new(a.cos(), a.sin(), 0.5)
            })
            .collect();
        assert!(matches!(fit_sphere(&pts, None), Err(FiducialError::SingularFit(_))));
        assert!(matches!(
            fit_sphere(&pts[..5], None),
            Err(FiducialError::TooFewPoints(5))
        ));
    }

    #[test]
    fn gauss_newton_cost_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.01).unwrap();
        for fixed in [None, Some(0.1)] {
            // Cap-only samples make the algebraic start noticeably off.
            let pts: Vec<Vec3> = sphere_samples(Vec3::zeros(), 0.1, 400, &mut rng)
                .into_iter()
                .filter(|p| p.z < -0.03)
                .map(|p| p + Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)))
                .collect();
            let trace = fit_sphere_traced(&pts, fixed).unwrap();
            assert!(trace.costs.windows(2).all(|w| w[1] <= w[0]), "{:?}", trace.costs);
            if let Some(r) = fixed {
                assert_eq!(trace.fit.radius, r);
            }
        }
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> RigidTransform {
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
                rng.random_range(1.0..3.0),
            ),
        )
    }

    #[test]
    fn frame_of_canonical_pattern_is_identity() {
        let f = build_fixture_frame(&FiducialPattern::default().centers).unwrap();
        assert!((f.to_matrix4() - nalgebra::Matrix4::identity()).norm() < 1e-12);
    }

    #[test]
    fn frame_is_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pattern = FiducialPattern::default();
        let base = build_fixture_frame(&pattern.centers).unwrap();
        for _ in 0..20 {
            let t = random_pose(&mut rng);
            let moved = build_fixture_frame(&pattern.placed(&t)).unwrap();
            assert!(((t * base).to_matrix4() - moved.to_matrix4()).norm() < 1e-9);
        }
    }

    #[test]
    fn coplanar_frame_rejected() {
        let c = [
            Vec3::zeros(),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
        ];
        assert!(matches!(build_fixture_frame(&c), Err(FiducialError::Coplanar(_))));
        assert!(FiducialPattern::new(c, 0.1).is_err());
        assert!(FiducialPattern::default().validate().is_ok());
    }

    fn fixture_cloud(pose: &RigidTransform, rng: &mut ChaCha8Rng) -> PointCloud {
        let pattern = FiducialPattern::default();
        let mut pts = Vec::new();
        for c in pattern.placed(pose) {
            pts.extend(sphere_samples(c, pattern.sphere_radius, 300, rng));
        }
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn detect_recovers_pose_and_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pose = random_pose(&mut rng);
        let cloud = fixture_cloud(&pose, &mut rng);
        let obs = detect_fixture(&cloud, &FiducialPattern::default(), &DetectionConfig::default()).unwrap();
        let (ang, dist) = obs.fixture_to_camera.distance_to(&pose);
        assert!(ang < 1e-9 && dist < 1e-9, "{ang} {dist}");

        let mut shuffled = cloud.points.clone();
        for i in (1..shuffled.len()).rev() {
            let j = rng.random_range(0..=i);
            shuffled.swap(i, j);
        }
        let obs2 = detect_fixture(
            &PointCloud::new(shuffled).unwrap(),
            &FiducialPattern::default(),
            &DetectionConfig::default(),
        )
        .unwrap();
        assert_eq!(obs.fixture_to_camera, obs2.fixture_to_camera);

        let half: Vec<Vec3> = cloud.points.iter().step_by(2).copied().collect();
        let obs3 = detect_fixture(
            &PointCloud::new(half).unwrap(),
            &FiducialPattern::default(),
            &DetectionConfig::default(),
        )
        .unwrap();
        let (ang, dist) = obs3.fixture_to_camera.distance_to(&pose);
        assert!(ang < 1e-9 && dist < 1e-9);
    }

    #[test]
    fn missing_sphere_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pattern = FiducialPattern::default();
        let pose = random_pose(&mut rng);
        let mut pts = Vec::new();
        for c in pattern.placed(&pose).iter().take(3) {
            pts.extend(sphere_samples(*c, 0.1, 300, &mut rng));
        }
        let err = detect_fixture(&PointCloud::new(pts).unwrap(), &pattern, &DetectionConfig::default()).unwrap_err();
        assert_eq!(err, FiducialError::TooFewSpheres(3));
    }
}
