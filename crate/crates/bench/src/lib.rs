//! Fixtures shared by the benchmarks.

use orpercept_core::calibration::{make_motion_pairs, MotionPair, PairingMode, PoseObservation};
use orpercept_core::mvpm::{LabelMap, ProjectedStack};
use orpercept_core::rig::CameraId;
use orpercept_core::simulator::{default_calibration_states, make_benchmark, BenchmarkConfig, RobotModel};
use orpercept_core::{RigidTransform, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` points with `d` features, uniform in a cube sized for a few
/// hundred neighbours per point.
pub fn features(n: usize, d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = 2.0 * 400f64.powf(1.0 / d as f64) / 4.0;
    (0..n * d).map(|_| rng.random_range(0.0..spread)).collect()
}

pub fn values(n: usize, k: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * k).map(|_| rng.random()).collect()
}

/// Exact motion pairs of the OP camera over the default calibration sweep.
pub fn motion_pairs() -> Vec<MotionPair> {
    let robot = RobotModel::default();
    let x = robot.mounts[CameraId::Op.index()];
    let fixture_to_base = RigidTransform::from_axis_angle(&Vec3::new(0.2, 1.0, 0.1), 0.4, Vec3::new(1.2, 0.3, 0.1));
    let obs: Vec<PoseObservation> = default_calibration_states()
        .iter()
        .map(|state| {
            let joint_to_base = robot.joint_to_base(state);
            PoseObservation {
                joint_to_base,
                fixture_to_camera: (joint_to_base * x).inverse() * fixture_to_base,
            }
        })
        .collect();
    make_motion_pairs(&obs, PairingMode::AllPairs)
        .expect("sweep has motion")
        .pairs
}

/// Projected stacks and labels of a few default-size benchmark scenes.
pub fn stacks(scenes: usize) -> Vec<(ProjectedStack, LabelMap)> {
    let bench = make_benchmark(&BenchmarkConfig {
        scenes,
        ..BenchmarkConfig::default()
    })
    .expect("benchmark renders");
    bench
        .scenes
        .iter()
        .flat_map(|s| CameraId::ALL.map(|c| s.stack(c).expect("stack builds")))
        .collect()
}
