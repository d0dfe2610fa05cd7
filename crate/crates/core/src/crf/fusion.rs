//! Multi-view CRF: every valid pixel of every view becomes a point in the
//! robot base frame, one CRF runs over the union, and the labels are read
//! back per view.

use super::{run_inference, CrfError, CrfParams, FilterBackend, UnaryField};
use crate::geometry::{depth_to_cloud_indexed, DepthImage, IntensityImage};
use crate::mvpm::{predict, CameraView, ConfidenceMap, LabelMap};

pub struct FusionInput<'a> {
    pub view: CameraView,
    pub depth: &'a DepthImage,
    pub intensity: &'a IntensityImage,
    pub confidence: &'a ConfidenceMap,
}

/// Label map per input view. Pixels without depth keep their per-view
/// argmax.
pub fn fuse_views(
    inputs: &[FusionInput<'_>],
    params: &CrfParams,
    backend: FilterBackend,
) -> Result<Vec<LabelMap>, CrfError> {
    let classes = inputs.first().ok_or(CrfError::Empty)?.confidence.classes();
    let mut positions = Vec::new();
    let mut intensity = Vec::new();
    let mut probs = Vec::new();
    let mut owners = Vec::new();
    for (v, input) in inputs.iter().enumerate() {
        let conf = input.confidence;
        if conf.classes() != classes || conf.pixel_count() != input.depth.len() {
            return Err(CrfError::Shape(format!("view {v}: confidence vs depth")));
        }
        let (cloud, pixels) = depth_to_cloud_indexed(input.depth, &input.view.intrinsics);
        for (p, &i) in cloud.points.iter().zip(&pixels) {
            positions.push(input.view.camera_to_base.transform_point(p));
            intensity.push(input.intensity.values()[i]);
            probs.extend(conf.pixel(i).iter().map(|&x| f64::from(x)));
            owners.push((v, i));
        }
    }
    let mut out: Vec<LabelMap> = inputs.iter().map(|i| predict(i.confidence)).collect();
    if positions.is_empty() {
        return Ok(out);
    }
    let unary = UnaryField::from_probabilities(&probs, classes)?;
    let labels = run_inference(&positions, &intensity, &unary, params, backend)?;
    let mut raw: Vec<Vec<u8>> = out.iter().map(|m| m.labels().to_vec()).collect();
    for (&(v, i), &l) in owners.iter().zip(&labels) {
        raw[v][i] = l;
    }
    for (m, r) in out.iter_mut().zip(raw) {
        *m = LabelMap::new(m.width(), m.height(), classes, r).map_err(|e| CrfError::Shape(e.to_string()))?;
    }
    Ok(out)
}
