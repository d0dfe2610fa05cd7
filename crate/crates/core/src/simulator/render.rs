use super::robot::{JointState, RobotModel};
use super::scene::SceneSpec;
use super::{SimError, NUM_CLASSES};
use crate::geometry::{
    depth_to_cloud_indexed, CameraIntrinsics, DepthImage, IntensityImage, PointCloud, RigidTransform,
};
use crate::mvpm::{CameraView, LabelMap};
use crate::rig::CameraId;
use crate::rng::{mix, stream};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Depth noise standard deviation as a fraction of the true depth.
    pub depth_sigma: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            depth_sigma: 0.01,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn none() -> Self {
        Self {
            depth_sigma: 0.0,
            dropout: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.depth_sigma >= 0.0 && self.depth_sigma.is_finite()) || !(0.0..1.0).contains(&self.dropout) {
            return Err(SimError::InvalidNoise(format!(
                "sigma {} dropout {}",
                self.depth_sigma, self.dropout
            )));
        }
        Ok(())
    }

    fn is_zero(&self) -> bool {
        self.depth_sigma == 0.0 && self.dropout == 0.0
    }
}

/// One rendered camera. Labels are the class of the nearest hit (0 where
/// nothing is hit) and are kept for dropped-out pixels too.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub camera: CameraId,
    pub intrinsics: CameraIntrinsics,
    pub camera_to_base: RigidTransform,
    pub depth: DepthImage,
    pub intensity: IntensityImage,
    pub labels: LabelMap,
}

impl RenderedView {
    pub fn view(&self) -> CameraView {
        CameraView {
            intrinsics: self.intrinsics,
            camera_to_base: self.camera_to_base,
        }
    }

    /// Camera-frame cloud of the valid pixels with labels and intensity,
    /// plus the pixel index of every point.
    pub fn cloud(&self) -> (PointCloud, Vec<usize>) {
        let (mut cloud, pixels) = depth_to_cloud_indexed(&self.depth, &self.intrinsics);
        cloud.labels = Some(pixels.iter().map(|&i| self.labels.get(i) as u16).collect());
        cloud.intensity = Some(pixels.iter().map(|&i| self.intensity.values()[i]).collect());
        (cloud, pixels)
    }
}

/// Ray casts `scene` from one camera. `frame` separates the noise streams
/// of successive renders that share a seed.
pub fn render_view(
    scene: &SceneSpec,
    camera: CameraId,
    intrinsics: &CameraIntrinsics,
    camera_to_base: &RigidTransform,
    noise: &NoiseModel,
    frame: u64,
) -> RenderedView {
    let (w, h) = (intrinsics.width, intrinsics.height);
    let origin = *camera_to_base.translation();
    let stream_id = mix(frame, camera.index() as u64, 0);
    let pixels: Vec<(f64, bool, f64, u8)> = (0..w * h)
        .into_par_iter()
        .map(|idx| {
            let ray = intrinsics.ray((idx % w) as f64, (idx / w) as f64);
            let dir = camera_to_base.transform_vector(&ray);
            let Some(hit) = scene.intersect(&origin, &dir) else {
                return (0.0, false, 0.0, 0);
            };
            let prim = &scene.primitives[hit.primitive];
            let dist = hit.t * dir.norm();
            let cos = (hit.normal.dot(&dir) / dir.norm()).abs();
            let intensity = prim.reflectivity * cos / (dist * dist);
            let mut depth = hit.t;
            let mut valid = true;
            if !noise.is_zero() {
                let mut rng = stream(noise.seed, stream_id, idx as u64);
                let n: f64 = rng.sample(StandardNormal);
                depth *= 1.0 + noise.depth_sigma * n;
                valid = depth > 0.0 && rng.random::<f64>() >= noise.dropout;
            }
            (if valid { depth } else { 0.0 }, valid, intensity, prim.class)
        })
        .collect();
    let depth = DepthImage::new(
        w,
        h,
        pixels.iter().map(|p| p.0).collect(),
        pixels.iter().map(|p| p.1).collect(),
    )
    .expect("rendered depth is positive where valid");
    let intensity = IntensityImage::new(w, h, pixels.iter().map(|p| p.2).collect()).expect("rendered intensity shape");
    let labels =
        LabelMap::new(w, h, NUM_CLASSES, pixels.iter().map(|p| p.3).collect()).expect("scene classes validated");
    RenderedView {
        camera,
        intrinsics: *intrinsics,
        camera_to_base: *camera_to_base,
        depth,
        intensity,
        labels,
    }
}

/// Renders all four cameras at one joint state, in canonical camera order.
pub fn render(
    scene: &SceneSpec,
    robot: &RobotModel,
    state: &JointState,
    intrinsics: &CameraIntrinsics,
    noise: &NoiseModel,
    frame: u64,
) -> Result<Vec<RenderedView>, SimError> {
    scene.validate()?;
    noise.validate()?;
    Ok(CameraId::ALL
        .iter()
        .map(|&cam| render_view(scene, cam, intrinsics, &robot.camera_to_base(cam, state), noise, frame))
        .collect())
}
