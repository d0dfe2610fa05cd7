use super::render::{render, NoiseModel, RenderedView};
use super::robot::{JointState, RobotModel};
use super::scene::{SceneSpec, Shape};
use super::{SimError, CLASS_VSC};
use crate::fiducials::FiducialPattern;
use crate::geometry::{project_point, CameraIntrinsics, PointCloud, RigidTransform, Vec3};
use crate::rig::CameraId;
use serde::{Deserialize, Serialize};

/// Fixture plus a slab standing in for the VSC, whose top face pins the
/// height the hand-eye solve cannot see.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSetup {
    pub pattern: FiducialPattern,
    pub fixture_to_base: RigidTransform,
    pub reference_center: Vec3,
    pub reference_size: Vec3,
    /// Extra primitives rendered with the fixture.
    pub clutter: SceneSpec,
}

impl Default for CalibrationSetup {
    fn default() -> Self {
        Self {
            pattern: FiducialPattern::default(),
            fixture_to_base: RigidTransform::from_translation(Vec3::new(2.0, -0.25, 0.55)) * RigidTransform::rot_z(0.3),
            reference_center: Vec3::new(3.0, 0.0, 1.05),
            reference_size: Vec3::new(0.8, 1.2, 0.04),
            clutter: SceneSpec::default(),
        }
    }
}

impl CalibrationSetup {
    pub fn scene(&self) -> SceneSpec {
        let mut s = SceneSpec::default();
        for c in self.pattern.placed(&self.fixture_to_base) {
            s.push(
                Shape::Sphere {
                    center: c,
                    radius: self.pattern.sphere_radius,
                },
                0,
                0.9,
            );
        }
        s.push(
            Shape::Box {
                center: self.reference_center,
                size: self.reference_size,
            },
            CLASS_VSC,
            0.7,
        );
        s.primitives.extend(self.clutter.primitives.iter().cloned());
        s
    }

    /// Surface samples of the reference slab in the base frame: a grid of
    /// `spacing` on the top face and, on the sides, rows `spacing / 10`
    /// apart so that axial offsets of matched side points stay tiny.
    pub fn reference_cloud(&self, spacing: f64) -> PointCloud {
        let lo = self.reference_center - self.reference_size / 2.0;
        let hi = self.reference_center + self.reference_size / 2.0;
        let steps = |a: f64, b: f64, s: f64| {
            let n = ((b - a) / s).ceil() as usize;
            (0..=n).map(move |i| a + (b - a) * i as f64 / n as f64)
        };
        let mut pts = Vec::new();
        for x in steps(lo.x, hi.x, spacing) {
            for y in steps(lo.y, hi.y, spacing) {
                pts.push(Vec3::new(x, y, hi.z));
            }
        }
        for z in steps(lo.z, hi.z, spacing / 10.0) {
            for x in steps(lo.x, hi.x, spacing) {
                pts.push(Vec3::new(x, lo.y, z));
                pts.push(Vec3::new(x, hi.y, z));
            }
            for y in steps(lo.y, hi.y, spacing) {
                pts.push(Vec3::new(lo.x, y, z));
                pts.push(Vec3::new(hi.x, y, z));
            }
        }
        let mut cloud = PointCloud::new(pts).expect("finite samples");
        cloud.labels = Some(vec![u16::from(CLASS_VSC); cloud.len()]);
        cloud
    }
}

/// Sample spacing of the reference slab model (m).
pub const REFERENCE_SPACING: f64 = 0.005;

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationFrame {
    pub state: JointState,
    pub joint_to_base: RigidTransform,
    pub views: Vec<RenderedView>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSequence {
    pub frames: Vec<CalibrationFrame>,
    /// Ground-truth mounts, as in [`RobotModel::mounts`].
    pub truth: [RigidTransform; 4],
    pub reference: PointCloud,
}

/// A short in-view sweep of the joint with cart displacements.
pub fn default_calibration_states() -> Vec<JointState> {
    vec![
        JointState::new(-0.55, 0.0, 0.0),
        JointState::new(-0.40, 0.15, -0.10),
        JointState::new(-0.25, -0.10, 0.15),
        JointState::new(-0.10, 0.15, 0.15),
        JointState::new(0.0, 0.0, 0.0),
        JointState::new(0.10, -0.15, -0.15),
        JointState::new(0.25, 0.10, -0.15),
        JointState::new(0.40, -0.15, 0.10),
        JointState::new(0.55, 0.05, 0.05),
        JointState::new(0.30, 0.0, 0.0),
    ]
}

pub fn generate_calibration_sequence(
    setup: &CalibrationSetup,
    robot: &RobotModel,
    states: &[JointState],
    intrinsics: &CameraIntrinsics,
    noise: &NoiseModel,
) -> Result<CalibrationSequence, SimError> {
    let centers = setup.pattern.placed(&setup.fixture_to_base);
    let margin = setup.pattern.sphere_radius;
    for (pose, state) in states.iter().enumerate() {
        for camera in CameraId::ALL {
            let to_cam = robot.camera_to_base(camera, state).inverse();
            let visible = centers.iter().all(|c| {
                project_point(&to_cam.transform_point(c), intrinsics)
                    .is_some_and(|p| p.depth > margin && intrinsics.contains(p.u, p.v))
            });
            if !visible {
                return Err(SimError::FixtureOutOfView { pose, camera });
            }
        }
    }
    let scene = setup.scene();
    let frames = states
        .iter()
        .enumerate()
        .map(|(k, state)| {
            Ok(CalibrationFrame {
                state: *state,
                joint_to_base: robot.joint_to_base(state),
                views: render(&scene, robot, state, intrinsics, noise, k as u64)?,
            })
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    Ok(CalibrationSequence {
        frames,
        truth: robot.mounts,
        reference: setup.reference_cloud(REFERENCE_SPACING),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sweep_keeps_fixture_in_view() {
        let k = CameraIntrinsics::tof_default().resized(88, 72);
        let seq = generate_calibration_sequence(
            &CalibrationSetup::default(),
            &RobotModel::default(),
            &default_calibration_states(),
            &k,
            &NoiseModel::none(),
        )
        .unwrap();
        assert_eq!(seq.frames.len(), default_calibration_states().len());
        for f in &seq.frames {
            let vsc = f.views[0].labels.labels().iter().filter(|&&l| l == CLASS_VSC).count();
            assert!(vsc > 20, "{vsc}");
        }
    }

    #[test]
    fn fixture_behind_camera_is_reported() {
        let k = CameraIntrinsics::tof_default().resized(88, 72);
        let states = [JointState::default(), JointState::new(std::f64::consts::PI, 0.0, 0.0)];
        let err = generate_calibration_sequence(
            &CalibrationSetup::default(),
            &RobotModel::default(),
            &states,
            &k,
            &NoiseModel::none(),
        )
        .unwrap_err();
        assert_eq!(
            err,
            SimError::FixtureOutOfView {
                pose: 1,
                camera: CameraId::Op
            }
        );
    }
}
