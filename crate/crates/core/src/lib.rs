//! Perception pipeline for a robot-mounted four-camera ToF sensor package:
//! camera-to-robot calibration, multi-view projection and merging of
//! per-view class confidences, a dense 3-D CRF baseline, segmentation
//! metrics and a synthetic scene simulator used as ground truth.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod crf;
pub mod dataio;
pub mod fiducials;
pub mod geometry;
pub mod metrics;
pub mod mvpm;
pub mod pipeline;
pub mod rig;
pub mod rng;
pub mod simulator;
pub mod spatial;

pub use geometry::{CameraIntrinsics, DepthImage, IntensityImage, PointCloud, RigidTransform, Vec3};
