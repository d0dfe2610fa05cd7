//! TOML run configuration shared by every command. Every section and
//! field is optional and falls back to its default.

use super::DataioError;
use crate::crf::CrfParams;
use crate::fiducials::{DetectionConfig, FiducialPattern};
use crate::mvpm::TrainConfig;
use crate::rig::CameraId;
use crate::simulator::{BenchmarkConfig, NoiseModel, SceneSpec};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub calibration: CalibrationConfig,
    pub benchmark: BenchmarkConfig,
    pub train: TrainConfig,
    pub crf: CrfParams,
    pub experiment: ExperimentConfig,
    /// Clutter rendered with the calibration fixture.
    pub scene: Option<SceneSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub pattern: FiducialPattern,
    pub detection: DetectionConfig,
    /// Robot poses as `[theta, cart_dx, cart_dy]`.
    pub poses: Vec<[f64; 3]>,
    pub width: usize,
    pub height: usize,
    pub noise: NoiseModel,
    /// Monte-Carlo trials for `tre`.
    pub trials: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            pattern: FiducialPattern::default(),
            detection: DetectionConfig::default(),
            poses: crate::simulator::default_calibration_states()
                .iter()
                .map(|s| [s.theta, s.offset[0], s.offset[1]])
                .collect(),
            width: 352,
            height: 287,
            noise: NoiseModel::default(),
            trials: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub k: usize,
    pub repetitions: usize,
    pub test_fraction: f64,
    /// Order in which `ablate` removes cameras; the target camera is
    /// never removed.
    pub ablation_order: Vec<CameraId>,
    /// Include the multi-view CRF baseline in `benchmark` and `kfold`.
    pub crf: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            k: 10,
            repetitions: 5,
            test_fraction: 0.1,
            ablation_order: vec![CameraId::Base, CameraId::Usm4, CameraId::Usm1, CameraId::Op],
            crf: true,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, DataioError> {
        let config: Self = toml::from_str(text).map_err(|e| DataioError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), DataioError> {
        let invalid = |m: &str| Err(DataioError::Invalid(m.into()));
        let c = &self.calibration;
        if c.poses.len() < 3 {
            return invalid("calibration needs at least 3 poses");
        }
        if c.poses.iter().flatten().any(|v| !v.is_finite()) {
            return invalid("non-finite calibration pose");
        }
        if c.width == 0 || c.height == 0 || c.trials == 0 {
            return invalid("calibration resolution and trials must be positive");
        }
        let e = &self.experiment;
        if e.k < 2 || e.repetitions == 0 || !(0.0..1.0).contains(&e.test_fraction) {
            return invalid("experiment needs k ≥ 2, repetitions ≥ 1, test_fraction in [0, 1)");
        }
        let mut order = e.ablation_order.clone();
        order.sort();
        if order != CameraId::ALL.to_vec() {
            return invalid("ablation_order must list each camera once");
        }
        if self.benchmark.scenes == 0 || self.benchmark.width == 0 || self.benchmark.height == 0 {
            return invalid("benchmark needs scenes and a resolution");
        }
        if self.train.network.classes != crate::simulator::NUM_CLASSES {
            return invalid("train.network.classes must match the simulator taxonomy");
        }
        self.crf.validate().map_err(|e| DataioError::Invalid(e.to_string()))?;
        if let Some(scene) = &self.scene {
            scene.validate().map_err(|e| DataioError::Invalid(e.to_string()))?;
        }
        Ok(())
    }
}
