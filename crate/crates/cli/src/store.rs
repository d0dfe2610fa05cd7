//! Directory layout of captured frames, shared by the calibration sweep and
//! the benchmark scenes:
//!
//! ```text
//! truth.json                       ground-truth calibration
//! kinematics.csv                   one row per frame
//! <prefix><NNN>_<CAM>_depth.orct   + _depth.valid
//! <prefix><NNN>_<CAM>_intensity.orct
//! <prefix><NNN>_<CAM>_labels.pgm
//! <prefix><NNN>_<CAM>_conf.orct    + _conf.valid (benchmark only)
//! ```

use crate::error::CliError;
use crate::manifest::{Inputs, Output};
use orpercept_core::dataio::{
    decode_confidence, decode_depth, decode_kinematics, decode_pgm, encode_confidence, encode_depth, encode_kinematics,
    encode_pgm, CalibrationFile, CameraCalibrationEntry, KinematicsRecord, MountFrame, TensorData, TensorFile,
};
use orpercept_core::mvpm::ConfidenceMap;
use orpercept_core::pipeline::camera_to_base;
use orpercept_core::rig::CameraId;
use orpercept_core::simulator::{RenderedView, NUM_CLASSES};
use orpercept_core::{CameraIntrinsics, IntensityImage, RigidTransform};
use std::collections::BTreeMap;
use std::path::Path;

pub const TRUTH_FILE: &str = "truth.json";
pub const KINEMATICS_FILE: &str = "kinematics.csv";
pub const SWEEP_PREFIX: &str = "pose";
pub const SCENE_PREFIX: &str = "scene";

pub struct Frame {
    pub theta: f64,
    pub joint_to_base: RigidTransform,
    /// Canonical camera order.
    pub views: Vec<RenderedView>,
    pub confidences: Option<Vec<ConfidenceMap>>,
}

fn stem(prefix: &str, index: usize, camera: CameraId) -> String {
    format!("{prefix}{index:03}_{camera}")
}

pub fn calibration_file(
    mounts: &[RigidTransform; 4],
    intrinsics: &CameraIntrinsics,
    residuals: &[BTreeMap<String, f64>; 4],
) -> CalibrationFile {
    CalibrationFile::new(
        CameraId::ALL
            .iter()
            .map(|&c| CameraCalibrationEntry {
                name: c,
                intrinsics: *intrinsics,
                frame: if c.on_joint() {
                    MountFrame::Joint
                } else {
                    MountFrame::Base
                },
                extrinsics: mounts[c.index()].to_rows(),
                residuals: residuals[c.index()].clone(),
            })
            .collect(),
    )
}

/// Mounts and intrinsics in canonical order; every camera must be present
/// with the frame its mount implies.
pub fn mounts_of(file: &CalibrationFile) -> Result<([RigidTransform; 4], [CameraIntrinsics; 4]), CliError> {
    let mut mounts = [RigidTransform::identity(); 4];
    let mut intrinsics = [CameraIntrinsics::tof_default(); 4];
    for c in CameraId::ALL {
        let entry = file
            .camera(c)
            .ok_or_else(|| CliError::Data(format!("calibration lacks camera {c}")))?;
        let expected = if c.on_joint() {
            MountFrame::Joint
        } else {
            MountFrame::Base
        };
        if entry.frame != expected {
            return Err(CliError::Data(format!(
                "camera {c} must map into the {expected:?} frame"
            )));
        }
        mounts[c.index()] = entry.transform()?;
        intrinsics[c.index()] = entry.intrinsics;
    }
    Ok((mounts, intrinsics))
}

pub fn write_frames(
    out: &mut Output,
    dir: &str,
    prefix: &str,
    frames: &[Frame],
    truth: &CalibrationFile,
) -> Result<(), CliError> {
    out.write(&format!("{dir}/{TRUTH_FILE}"), truth.encode()?.as_bytes())?;
    let records: Vec<KinematicsRecord> = frames
        .iter()
        .enumerate()
        .map(|(i, f)| KinematicsRecord {
            timestamp_us: (i as u64 + 1) * 100_000,
            theta: f.theta,
            mounts: CameraId::ALL.map(|c| {
                if c.on_joint() {
                    f.joint_to_base
                } else {
                    RigidTransform::identity()
                }
            }),
        })
        .collect();
    out.write(
        &format!("{dir}/{KINEMATICS_FILE}"),
        encode_kinematics(&records)?.as_bytes(),
    )?;
    for (i, f) in frames.iter().enumerate() {
        for (c, v) in f.views.iter().enumerate() {
            let s = format!("{dir}/{}", stem(prefix, i, v.camera));
            let (depth, valid) = encode_depth(&v.depth)?;
            out.write(&format!("{s}_depth.orct"), &depth)?;
            out.write(&format!("{s}_depth.valid"), &valid)?;
            let intensity = TensorFile::new(
                v.intensity.width(),
                v.intensity.height(),
                1,
                TensorData::F64(v.intensity.values().to_vec()),
            )?;
            out.write(&format!("{s}_intensity.orct"), &intensity.encode()?)?;
            out.write(&format!("{s}_labels.pgm"), &encode_pgm(&v.labels))?;
            if let Some(conf) = &f.confidences {
                let (t, valid) = encode_confidence(&conf[c])?;
                out.write(&format!("{s}_conf.orct"), &t)?;
                out.write(&format!("{s}_conf.valid"), &valid)?;
            }
        }
    }
    Ok(())
}

/// Loads every frame under `dir`. Camera poses come from `calibration`
/// when given, else from the directory's ground truth.
pub fn read_frames(
    inputs: &mut Inputs,
    dir: &Path,
    prefix: &str,
    calibration: Option<&CalibrationFile>,
    with_confidence: bool,
) -> Result<(Vec<Frame>, CalibrationFile), CliError> {
    let truth = CalibrationFile::decode(&inputs.read_string(&dir.join(TRUTH_FILE))?)?;
    let (mounts, intrinsics) = mounts_of(calibration.unwrap_or(&truth))?;
    let records = decode_kinematics(&inputs.read_string(&dir.join(KINEMATICS_FILE))?)?;
    let mut frames = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let joint_to_base = r.mounts[CameraId::Op.index()];
        let mut views = Vec::with_capacity(4);
        let mut confidences = Vec::with_capacity(4);
        for c in CameraId::ALL {
            let path = |suffix: &str| dir.join(format!("{}_{suffix}", stem(prefix, i, c)));
            let depth = decode_depth(&inputs.read(&path("depth.orct"))?, &inputs.read(&path("depth.valid"))?)?;
            let t = TensorFile::decode(&inputs.read(&path("intensity.orct"))?)?;
            let TensorData::F64(values) = t.data else {
                return Err(CliError::Data(format!(
                    "{}: intensity must be f64",
                    path("intensity.orct").display()
                )));
            };
            let intensity = IntensityImage::new(t.width, t.height, values)?;
            let labels = decode_pgm(&inputs.read(&path("labels.pgm"))?, NUM_CLASSES)?;
            if with_confidence {
                confidences.push(decode_confidence(
                    &inputs.read(&path("conf.orct"))?,
                    &inputs.read(&path("conf.valid"))?,
                )?);
            }
            views.push(RenderedView {
                camera: c,
                intrinsics: intrinsics[c.index()],
                camera_to_base: camera_to_base(&mounts, c, &joint_to_base),
                depth,
                intensity,
                labels,
            });
        }
        frames.push(Frame {
            theta: r.theta,
            joint_to_base,
            views,
            confidences: with_confidence.then_some(confidences),
        });
    }
    Ok((frames, truth))
}
