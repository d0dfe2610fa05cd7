//! Camera identities of the four-camera rig.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Mount identity. The canonical order is `Op, Usm1, Usm4, Base`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CameraId {
    #[serde(rename = "OP")]
    Op,
    #[serde(rename = "USM1")]
    Usm1,
    #[serde(rename = "USM4")]
    Usm4,
    #[serde(rename = "BASE")]
    Base,
}

impl CameraId {
    pub const ALL: [CameraId; 4] = [CameraId::Op, CameraId::Usm1, CameraId::Usm4, CameraId::Base];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CameraId::Op => "OP",
            CameraId::Usm1 => "USM1",
            CameraId::Usm4 => "USM4",
            CameraId::Base => "BASE",
        }
    }

    /// Whether the mount moves with the robot joint (everything but BASE).
    pub fn on_joint(self) -> bool {
        self != CameraId::Base
    }

    /// Slot order of a projected stack whose first slot is `self`: the
    /// canonical list with `self` swapped into position 0.
    pub fn slot_order(self) -> [CameraId; 4] {
        let mut order = Self::ALL;
        order.swap(0, self.index());
        order
    }
}

impl fmt::Display for CameraId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CameraId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "OP" => Ok(CameraId::Op),
            "USM1" => Ok(CameraId::Usm1),
            "USM4" => Ok(CameraId::Usm4),
            "BASE" => Ok(CameraId::Base),
            other => Err(format!("unknown camera {other:?}")),
        }
    }
}
