//! Label PGMs, calibration JSON, kinematics CSV and PLY export.

use super::DataioError;
use crate::geometry::{CameraIntrinsics, PointCloud, RigidTransform};
use crate::mvpm::LabelMap;
use crate::rig::CameraId;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Orthonormality tolerance applied when extrinsics are loaded.
pub const LOAD_ORTHONORMAL_TOL: f64 = 1e-6;

pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    out.extend_from_slice(labels.labels());
    out
}

/// Binary 8-bit PGM; `#` comments in the header are skipped.
pub fn decode_pgm(bytes: &[u8], classes: usize) -> Result<LabelMap, DataioError> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(DataioError::Truncated {
                offset: pos,
                needed: 1,
                available: 0,
            });
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| DataioError::Parse("PGM header".into()))?);
    }
    if fields[0] != "P5" {
        return Err(DataioError::Parse(format!("not a binary PGM: {:?}", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| DataioError::Parse(format!("PGM header field {s:?}")))
    };
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(DataioError::Parse(format!("PGM maxval {max}")));
    }
    pos += 1;
    let n = w * h;
    let available = bytes.len().saturating_sub(pos);
    if available < n {
        return Err(DataioError::Truncated {
            offset: pos,
            needed: n,
            available,
        });
    }
    if available > n {
        return Err(DataioError::TrailingBytes {
            offset: pos + n,
            extra: available - n,
        });
    }
    Ok(LabelMap::new(w, h, classes, bytes[pos..].to_vec())?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MountFrame {
    Joint,
    Base,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraCalibrationEntry {
    pub name: CameraId,
    pub intrinsics: CameraIntrinsics,
    /// Frame the extrinsics map into.
    pub frame: MountFrame,
    /// Camera-to-mount transform, row-major.
    pub extrinsics: [[f64; 4]; 4],
    /// Named residuals of the solve (meters or radians).
    pub residuals: std::collections::BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub format_version: u16,
    pub tool_version: String,
    pub cameras: Vec<CameraCalibrationEntry>,
}

impl CalibrationFile {
    pub fn new(cameras: Vec<CameraCalibrationEntry>) -> Self {
        Self {
            format_version: super::binary::FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            cameras,
        }
    }

    pub fn encode(&self) -> Result<String, DataioError> {
        if self
            .cameras
            .iter()
            .flat_map(|c| c.extrinsics.iter().flatten())
            .any(|x| !x.is_finite())
        {
            return Err(DataioError::Invalid("non-finite extrinsics".into()));
        }
        let mut s = serde_json::to_string_pretty(self).map_err(|e| DataioError::Parse(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn decode(text: &str) -> Result<Self, DataioError> {
        let file: CalibrationFile = serde_json::from_str(text).map_err(|e| DataioError::Parse(e.to_string()))?;
        if file.format_version != super::binary::FORMAT_VERSION {
            return Err(DataioError::UnsupportedVersion(file.format_version));
        }
        for c in &file.cameras {
            c.transform()?;
            c.intrinsics
                .validate()
                .map_err(|e| DataioError::Invalid(e.to_string()))?;
        }
        Ok(file)
    }

    pub fn camera(&self, id: CameraId) -> Option<&CameraCalibrationEntry> {
        self.cameras.iter().find(|c| c.name == id)
    }
}

impl CameraCalibrationEntry {
    pub fn transform(&self) -> Result<RigidTransform, DataioError> {
        RigidTransform::from_rows(&self.extrinsics, LOAD_ORTHONORMAL_TOL)
            .map_err(|e| DataioError::Invalid(format!("{} extrinsics: {e}", self.name)))
    }
}

/// One synchronized kinematics sample: the joint angle and, per camera in
/// canonical order, the transform of its mounting frame into the base.
#[derive(Clone, Debug, PartialEq)]
pub struct KinematicsRecord {
    pub timestamp_us: u64,
    pub theta: f64,
    pub mounts: [RigidTransform; 4],
}

fn kinematics_header() -> String {
    let mut h = String::from("timestamp_us,theta");
    for cam in CameraId::ALL {
        for r in 0..4 {
            for c in 0..4 {
                write!(h, ",{}_{r}{c}", cam.name()).unwrap();
            }
        }
    }
    h
}

pub fn encode_kinematics(records: &[KinematicsRecord]) -> Result<String, DataioError> {
    let mut out = kinematics_header();
    out.push('\n');
    for (i, r) in records.iter().enumerate() {
        if i > 0 && r.timestamp_us <= records[i - 1].timestamp_us {
            return Err(DataioError::Invalid(format!("timestamps not increasing at row {i}")));
        }
        if !r.theta.is_finite() {
            return Err(DataioError::Invalid(format!("theta at row {i}")));
        }
        write!(out, "{},{:?}", r.timestamp_us, r.theta).unwrap();
        for m in &r.mounts {
            for v in m.to_rows().iter().flatten() {
                write!(out, ",{v:?}").unwrap();
            }
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn decode_kinematics(text: &str) -> Result<Vec<KinematicsRecord>, DataioError> {
    let mut lines = text.lines();
    if lines.next() != Some(kinematics_header().as_str()) {
        return Err(DataioError::Parse("kinematics header".into()));
    }
    let mut out: Vec<KinematicsRecord> = Vec::new();
    for (row, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let err = |what: &str| DataioError::Parse(format!("kinematics row {}: {what}", row + 1));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 2 + 64 {
            return Err(err(&format!("{} columns", cols.len())));
        }
        let timestamp_us: u64 = cols[0].parse().map_err(|_| err("timestamp"))?;
        let vals: Vec<f64> = cols[1..]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| err(c)))
            .collect::<Result<_, _>>()?;
        let mut mounts = [RigidTransform::identity(); 4];
        for (k, m) in mounts.iter_mut().enumerate() {
            let mut rows = [[0.0; 4]; 4];
            for (i, v) in vals[1 + 16 * k..1 + 16 * (k + 1)].iter().enumerate() {
                rows[i / 4][i % 4] = *v;
            }
            *m = RigidTransform::from_rows(&rows, LOAD_ORTHONORMAL_TOL).map_err(|e| err(&e.to_string()))?;
        }
        if out.last().is_some_and(|p| p.timestamp_us >= timestamp_us) {
            return Err(err("timestamps not increasing"));
        }
        out.push(KinematicsRecord {
            timestamp_us,
            theta: vals[0],
            mounts,
        });
    }
    Ok(out)
}

/// ASCII PLY with `x y z` and, when present, `label` and `intensity`.
pub fn encode_ply(cloud: &PointCloud) -> String {
    let mut out = format!("ply\nformat ascii 1.0\nelement vertex {}\n", cloud.len());
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.labels.is_some() {
        out.push_str("property ushort label\n");
    }
    if cloud.intensity.is_some() {
        out.push_str("property double intensity\n");
    }
    out.push_str("end_header\n");
    for (i, p) in cloud.points.iter().enumerate() {
        write!(out, "{:?} {:?} {:?}", p.x, p.y, p.z).unwrap();
        if let Some(l) = &cloud.labels {
            write!(out, " {}", l[i]).unwrap();
        }
        if let Some(v) = &cloud.intensity {
            write!(out, " {:?}", v[i]).unwrap();
        }
        out.push('\n');
    }
    out
}
