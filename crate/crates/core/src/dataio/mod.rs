//! File formats for every artifact: binary containers for tensors,
//! validity masks and checkpoints, label PGMs, calibration JSON,
//! kinematics CSV, PLY export and the TOML run configuration.

mod binary;
mod config;
mod text;

pub use binary::{
    decode_checkpoint, encode_checkpoint, TensorData, TensorFile, ValidityFile, CHECKPOINT_MAGIC, FORMAT_VERSION,
    TENSOR_MAGIC, VALIDITY_MAGIC,
};
pub use config::RunConfig;
pub use text::{
    decode_kinematics, decode_pgm, encode_kinematics, encode_pgm, encode_ply, CalibrationFile, CameraCalibrationEntry,
    KinematicsRecord, MountFrame, LOAD_ORTHONORMAL_TOL,
};

use crate::geometry::DepthImage;
use crate::mvpm::{ConfidenceMap, MvpmError};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DataioError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("truncated at offset {offset}: need {needed} bytes, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{extra} trailing bytes at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("NaN at payload index {index}")]
    NaN { index: usize },
    #[error("shape: {0}")]
    Shape(String),
    #[error("parse: {0}")]
    Parse(String),
    #[error("invalid: {0}")]
    Invalid(String),
    #[error(transparent)]
    Mvpm(#[from] MvpmError),
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, DataioError> {
    std::fs::read(path).map_err(|e| DataioError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataioError> {
    std::fs::write(path, bytes).map_err(|e| DataioError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Path of the validity sidecar written next to a tensor file.
pub fn validity_path(tensor: &Path) -> PathBuf {
    tensor.with_extension("valid")
}

/// Depth as an f64 single-channel tensor plus its validity bitmap.
pub fn encode_depth(depth: &DepthImage) -> Result<(Vec<u8>, Vec<u8>), DataioError> {
    let (w, h) = (depth.width(), depth.height());
    let t = TensorFile::new(w, h, 1, TensorData::F64(depth.values().to_vec()))?;
    let v = ValidityFile {
        width: w,
        height: h,
        valid: depth.validity().to_vec(),
    };
    Ok((t.encode()?, v.encode()?))
}

pub fn decode_depth(tensor: &[u8], validity: &[u8]) -> Result<DepthImage, DataioError> {
    let t = TensorFile::decode(tensor)?;
    let v = ValidityFile::decode(validity)?;
    let TensorData::F64(values) = t.data else {
        return Err(DataioError::Shape("depth tensors are f64".into()));
    };
    if t.channels != 1 || (t.width, t.height) != (v.width, v.height) {
        return Err(DataioError::Shape("depth tensor and validity disagree".into()));
    }
    DepthImage::new(t.width, t.height, values, v.valid).map_err(|e| DataioError::Invalid(e.to_string()))
}

pub fn encode_confidence(conf: &ConfidenceMap) -> Result<(Vec<u8>, Vec<u8>), DataioError> {
    let (w, h) = (conf.width(), conf.height());
    let t = TensorFile::new(w, h, conf.classes(), TensorData::F32(conf.data().to_vec()))?;
    let v = ValidityFile {
        width: w,
        height: h,
        valid: conf.validity().to_vec(),
    };
    Ok((t.encode()?, v.encode()?))
}

pub fn decode_confidence(tensor: &[u8], validity: &[u8]) -> Result<ConfidenceMap, DataioError> {
    let t = TensorFile::decode(tensor)?;
    let v = ValidityFile::decode(validity)?;
    let TensorData::F32(data) = t.data else {
        return Err(DataioError::Shape("confidence tensors are f32".into()));
    };
    if (t.width, t.height) != (v.width, v.height) {
        return Err(DataioError::Shape("confidence tensor and validity disagree".into()));
    }
    Ok(ConfidenceMap::new(t.width, t.height, t.channels, data, v.valid)?)
}
