//! Synthetic ground truth: labeled primitive scenes, the four-camera robot,
//! ray-cast depth/intensity/label rendering with sensor noise, and
//! corrupted per-view confidences standing in for a segmentation backbone.

mod benchmark;
mod calibration;
mod confidence;
mod render;
mod robot;
mod scene;

pub use benchmark::{make_benchmark, make_scene, or_scene, Benchmark, BenchmarkConfig, BenchmarkScene};
pub use calibration::{
    default_calibration_states, generate_calibration_sequence, CalibrationFrame, CalibrationSequence, CalibrationSetup,
    REFERENCE_SPACING,
};
pub use confidence::{generate_confidence, ConfidenceCorruption};
pub use render::{render, render_view, NoiseModel, RenderedView};
pub use robot::{JointState, RobotModel};
pub use scene::{Hit, Primitive, SceneSpec, Shape};

use crate::mvpm::MvpmError;
use crate::rig::CameraId;
use thiserror::Error;

pub const NUM_CLASSES: usize = 9;

pub const CLASS_BG: u8 = 0;
pub const CLASS_TABLE: u8 = 1;
pub const CLASS_PSC: u8 = 2;
pub const CLASS_VSC: u8 = 3;
pub const CLASS_HUMAN: u8 = 4;
pub const CLASS_LIGHT: u8 = 5;
pub const CLASS_MAYO: u8 = 6;
pub const CLASS_STERILE: u8 = 7;
pub const CLASS_CART: u8 = 8;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "Background",
    "OR Table",
    "PSC",
    "VSC",
    "Human",
    "Ceiling Light",
    "Mayo Stand",
    "Sterile Table",
    "Anesthesia Cart",
];

/// Target share of each class among non-background pixels.
pub const TARGET_FREQUENCIES: [f64; NUM_CLASSES] =
    [0.0, 0.4329, 0.4113, 0.0060, 0.0542, 0.0035, 0.0176, 0.0299, 0.0442];

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
    #[error("invalid confidence corruption: {0}")]
    InvalidCorruption(String),
    #[error("fixture not fully in view of {camera} at pose {pose}")]
    FixtureOutOfView { pose: usize, camera: CameraId },
    #[error("scene config: {0}")]
    Config(String),
    #[error(transparent)]
    Mvpm(#[from] MvpmError),
}
