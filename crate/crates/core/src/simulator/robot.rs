use crate::geometry::{RigidTransform, Vec3};
use crate::rig::CameraId;
use serde::{Deserialize, Serialize};

/// Joint configuration: rotation about the vertical axis plus the planar
/// position of the cart carrying the joint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub theta: f64,
    pub offset: [f64; 2],
}

impl JointState {
    pub fn new(theta: f64, dx: f64, dy: f64) -> Self {
        Self {
            theta,
            offset: [dx, dy],
        }
    }
}

/// `mounts[i]` maps camera `i` into the joint frame for the joint cameras
/// and into the base frame for BASE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotModel {
    pub joint_height: f64,
    pub mounts: [RigidTransform; 4],
}

impl Default for RobotModel {
    /// OP high at the center, USM1/USM4 lateral, BASE low on the cart.
    fn default() -> Self {
        let mount = |eye: [f64; 3], at: [f64; 3]| {
            RigidTransform::look_at(Vec3::from(eye), Vec3::from(at), Vec3::z()).expect("mount geometry")
        };
        Self {
            joint_height: 1.75,
            mounts: [
                mount([0.20, 0.0, 0.05], [2.0, 0.0, -0.9]),
                mount([0.30, 0.5, -0.05], [2.0, 0.35, -0.95]),
                mount([0.30, -0.5, -0.05], [2.0, -0.35, -0.95]),
                mount([0.45, 0.0, 0.60], [2.5, 0.0, 0.75]),
            ],
        }
    }
}

impl RobotModel {
    pub fn joint_to_base(&self, state: &JointState) -> RigidTransform {
        RigidTransform::from_translation(Vec3::new(state.offset[0], state.offset[1], self.joint_height))
            * RigidTransform::rot_z(state.theta)
    }

    pub fn camera_to_base(&self, camera: CameraId, state: &JointState) -> RigidTransform {
        let mount = self.mounts[camera.index()];
        if camera.on_joint() {
            self.joint_to_base(state) * mount
        } else {
            mount
        }
    }
}
