//! Multi-view projection and merging: per-view confidence and depth are
//! projected into a target camera, stacked in a fixed slot order and merged
//! either by a fixed rule or by a small hourglass network.

mod maps;
pub mod network;
pub mod train;

pub use maps::{AugmentedMap, ConfidenceMap, LabelMap, ProjectedStack, SIMPLEX_TOL};
pub use network::{MergeNetwork, NetworkConfig};
pub use train::{train_merge, Sample, TrainConfig, TrainReport};

use crate::geometry::{project_point, CameraIntrinsics, DepthImage, RigidTransform, Vec3};
use crate::rig::CameraId;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MvpmError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("label {0} out of range for {1} classes")]
    LabelOutOfRange(usize, usize),
    #[error("pixel {0} is not on the probability simplex")]
    NotOnSimplex(usize),
    #[error("no map supplied for camera {0}")]
    MissingCamera(CameraId),
    #[error("camera {0} supplied twice")]
    DuplicateCamera(CameraId),
    #[error("label map has no valid pixel")]
    NoValidPixels,
    #[error("empty training set")]
    EmptyDataset,
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("parameter vector has {got} values, network needs {want}")]
    ParameterCount { got: usize, want: usize },
}

/// Intrinsics plus camera-to-base extrinsics of one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraView {
    pub intrinsics: CameraIntrinsics,
    pub camera_to_base: RigidTransform,
}

/// Fixed merge rules used as baselines for the learned merge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixedMerge {
    Max,
    Mean,
}

/// Depth ties closer than this keep the earlier source pixel.
pub const ZBUFFER_TIE: f64 = 1e-3;

/// Concatenates confidence with depth; a pixel is valid only if both are.
pub fn augment(conf: &ConfidenceMap, depth: &DepthImage) -> Result<AugmentedMap, MvpmError> {
    if conf.width() != depth.width() || conf.height() != depth.height() {
        return Err(MvpmError::DimensionMismatch(format!(
            "confidence {}x{} vs depth {}x{}",
            conf.width(),
            conf.height(),
            depth.width(),
            depth.height()
        )));
    }
    let c = conf.classes();
    let n = conf.pixel_count();
    let mut data = Vec::with_capacity(n * (c + 1));
    let mut valid = Vec::with_capacity(n);
    for i in 0..n {
        data.extend_from_slice(conf.pixel(i));
        match depth.get(i) {
            Some(d) if conf.validity()[i] => {
                data.push(d as f32);
                valid.push(true);
            }
            _ => {
                data.push(0.0);
                valid.push(false);
            }
        }
    }
    Ok(AugmentedMap::from_parts_unchecked(
        conf.width(),
        conf.height(),
        c,
        data,
        valid,
    ))
}

/// Inverse of [`augment`]: the probability block and the depth channel.
pub fn split(map: &AugmentedMap) -> (ConfidenceMap, Vec<f32>) {
    let c = map.classes();
    let n = map.pixel_count();
    let mut probs = Vec::with_capacity(n * c);
    let mut depth = Vec::with_capacity(n);
    for i in 0..n {
        probs.extend_from_slice(map.probabilities(i));
        depth.push(map.depth(i));
    }
    (
        ConfidenceMap::from_parts_unchecked(map.width(), map.height(), c, probs, map.validity().to_vec()),
        depth,
    )
}

/// Splats every valid source pixel into the destination image plane with a
/// z-buffer. The depth channel is rewritten as destination-frame depth.
pub fn project_view(src: &AugmentedMap, src_cam: &CameraView, dst_cam: &CameraView) -> AugmentedMap {
    let k_src = &src_cam.intrinsics;
    let k_dst = &dst_cam.intrinsics;
    let c = src.classes();
    let ch = c + 1;
    let mut out = AugmentedMap::empty(k_dst.width, k_dst.height, c);
    let src_to_dst = dst_cam.camera_to_base.inverse() * src_cam.camera_to_base;
    let identity = src_cam == dst_cam;
    for i in 0..src.pixel_count() {
        if !src.is_valid(i) {
            continue;
        }
        let depth = src.depth(i) as f64;
        let (target, z) = if identity {
            (i, depth)
        } else {
            let u = (i % k_src.width) as f64;
            let v = (i / k_src.width) as f64;
            let ray = k_src.ray(u, v);
            let p: Vec3 = src_to_dst.transform_point(&(ray * depth));
            let Some(proj) = project_point(&p, k_dst) else {
                continue;
            };
            let Some(j) = k_dst.pixel_index(proj.u, proj.v) else {
                continue;
            };
            (j, proj.depth)
        };
        let current = if out.is_valid(target) {
            Some(out.depth(target) as f64)
        } else {
            None
        };
        if let Some(cur) = current {
            if z >= cur - ZBUFFER_TIE {
                continue;
            }
        }
        let dst = &mut out.data_mut()[target * ch..(target + 1) * ch];
        dst[..c].copy_from_slice(src.probabilities(i));
        dst[c] = z as f32;
        out.valid_mut()[target] = true;
    }
    out
}

/// Orders four maps already in the target plane into a stack whose slot 0
/// is the target camera.
pub fn sort_stack(target: CameraId, maps: Vec<(CameraId, AugmentedMap)>) -> Result<ProjectedStack, MvpmError> {
    let mut by_cam: [Option<AugmentedMap>; 4] = [None, None, None, None];
    for (cam, map) in maps {
        let slot = &mut by_cam[cam.index()];
        if slot.is_some() {
            return Err(MvpmError::DuplicateCamera(cam));
        }
        *slot = Some(map);
    }
    let order = target.slot_order();
    let mut slots = Vec::with_capacity(4);
    for cam in order {
        let map = by_cam[cam.index()].take().ok_or(MvpmError::MissingCamera(cam))?;
        slots.push(map);
    }
    let (w, h, c) = (slots[0].width(), slots[0].height(), slots[0].classes());
    if slots
        .iter()
        .any(|m| m.width() != w || m.height() != h || m.classes() != c)
    {
        return Err(MvpmError::DimensionMismatch("stack slots differ in shape".into()));
    }
    let slots: [AugmentedMap; 4] = slots.try_into().expect("four slots");
    Ok(ProjectedStack { target, order, slots })
}

/// Projects every view into `target` and sorts the result.
pub fn build_stack(
    target: CameraId,
    views: &[(CameraId, AugmentedMap, CameraView)],
) -> Result<ProjectedStack, MvpmError> {
    let dst = views
        .iter()
        .find(|(cam, _, _)| *cam == target)
        .map(|(_, _, v)| *v)
        .ok_or(MvpmError::MissingCamera(target))?;
    let projected = views
        .iter()
        .map(|(cam, map, view)| (*cam, project_view(map, view, &dst)))
        .collect();
    sort_stack(target, projected)
}

/// Per-class max or mean over the valid slots, renormalized to the simplex.
pub fn merge_fixed(stack: &ProjectedStack, mode: FixedMerge) -> ConfidenceMap {
    let c = stack.classes();
    let n = stack.slots[0].pixel_count();
    let mut data = vec![0.0f32; n * c];
    let mut valid = vec![false; n];
    let mut acc = vec![0.0f64; c];
    for i in 0..n {
        acc.iter_mut().for_each(|a| *a = 0.0);
        let mut count = 0usize;
        for slot in stack.slots.iter().filter(|s| s.is_valid(i)) {
            for (a, &p) in acc.iter_mut().zip(slot.probabilities(i)) {
                match mode {
                    FixedMerge::Max => *a = a.max(p as f64),
                    FixedMerge::Mean => *a += p as f64,
                }
            }
            count += 1;
        }
        if count == 0 {
            continue;
        }
        let total: f64 = acc.iter().sum();
        if total <= 0.0 {
            continue;
        }
        for (d, a) in data[i * c..(i + 1) * c].iter_mut().zip(&acc) {
            *d = (a / total) as f32;
        }
        valid[i] = true;
    }
    ConfidenceMap::from_parts_unchecked(stack.width(), stack.height(), c, data, valid)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Per-pixel argmax. Invalid pixels get class 0.
pub fn predict(conf: &ConfidenceMap) -> LabelMap {
    let labels = (0..conf.pixel_count())
        .map(|i| {
            if conf.validity()[i] {
                argmax(conf.pixel(i)) as u8
            } else {
                0
            }
        })
        .collect();
    LabelMap::new(conf.width(), conf.height(), conf.classes(), labels).expect("argmax in range")
}

/// Merge strategies available to callers that pick one at run time.
#[derive(Clone, Debug)]
pub enum Merger<'a> {
    Fixed(FixedMerge),
    Network(&'a MergeNetwork),
}

impl Merger<'_> {
    pub fn merge(&self, stack: &ProjectedStack) -> Result<ConfidenceMap, MvpmError> {
        match self {
            Merger::Fixed(mode) => Ok(merge_fixed(stack, *mode)),
            Merger::Network(net) => net.confidence(stack),
        }
    }

    pub fn predict(&self, stack: &ProjectedStack) -> Result<LabelMap, MvpmError> {
        self.merge(stack).map(|c| predict(&c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr(w: usize, h: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(
            40.0,
            40.0,
            (w as f64 - 1.0) / 2.0,
            (h as f64 - 1.0) / 2.0,
            w,
            h,
            Default::default(),
        )
        .unwrap()
    }

    fn random_conf(w: usize, h: usize, c: usize, seed: u64) -> ConfidenceMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        for _ in 0..w * h {
            let raw: Vec<f32> = (0..c).map(|_| rng.random::<f32>() + 0.01).collect();
            let s: f32 = raw.iter().sum();
            data.extend(raw.iter().map(|v| v / s));
        }
        ConfidenceMap::new(w, h, c, data, vec![true; w * h]).unwrap()
    }

    fn single_slot(c: usize, probs: &[f32]) -> AugmentedMap {
        let mut data = probs.to_vec();
        data.push(1.0);
        AugmentedMap::new(1, 1, c, data, vec![true]).unwrap()
    }

    fn stack_of(slots: [AugmentedMap; 4]) -> ProjectedStack {
        ProjectedStack {
            target: CameraId::Op,
            order: CameraId::Op.slot_order(),
            slots,
        }
    }

    #[test]
    fn augment_uniform_and_split_round_trip() {
        let conf = ConfidenceMap::uniform(4, 3, 2);
        let mut vals = vec![1.5; 12];
        vals[7] = 0.0;
        let depth = DepthImage::from_values(4, 3, vals).unwrap();
        let aug = augment(&conf, &depth).unwrap();
        assert_eq!(aug.probabilities(0), &[0.5, 0.5]);
        assert_eq!(aug.depth(0), 1.5);
        assert!(!aug.is_valid(7));
        let (c2, d2) = split(&aug);
        assert_eq!(c2.data(), conf.data());
        assert_eq!(d2[0], 1.5);
        assert!(augment(&conf, &DepthImage::invalid(3, 3)).is_err());
    }

    #[test]
    fn identity_projection_is_exact() {
        let k = intr(16, 12);
        let conf = random_conf(16, 12, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vals: Vec<f64> = (0..16 * 12).map(|_| rng.random_range(0.5..4.0)).collect();
        let aug = augment(&conf, &DepthImage::from_values(16, 12, vals).unwrap()).unwrap();
        let view = CameraView {
            intrinsics: k,
            camera_to_base: RigidTransform::from_axis_angle(&Vec3::new(0.3, 0.1, 1.0), 0.4, Vec3::new(1.0, 2.0, 0.5)),
        };
        let out = project_view(&aug, &view, &view);
        for i in 0..aug.pixel_count() {
            assert!(out.is_valid(i));
            for (a, b) in out.probabilities(i).iter().zip(aug.probabilities(i)) {
                assert!((a - b).abs() < 1e-6);
            }
            assert!((out.depth(i) - aug.depth(i)).abs() < 1e-6);
        }
    }

    #[test]
    fn nearest_depth_wins() {
        // Two source pixels on the destination optical axis: a pinhole at
        // the origin sees both rays collapse onto the same pixel.
        let k = intr(5, 5);
        let mut data = vec![0.0f32; 25 * 3];
        let mut valid = vec![false; 25];
        for (idx, cls, d) in [(12usize, 0usize, 2.0f32), (13usize, 1usize, 1.0f32)] {
            data[idx * 3 + cls] = 1.0;
            data[idx * 3 + 2] = d;
            valid[idx] = true;
        }
        let src = AugmentedMap::new(5, 5, 2, data, valid).unwrap();
        let src_view = CameraView {
            intrinsics: k,
            camera_to_base: RigidTransform::identity(),
        };
        // Destination camera far away along the source axis so both points
        // land on one pixel.
        let dst_k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 1, 1, Default::default()).unwrap();
        let dst_view = CameraView {
            intrinsics: dst_k,
            camera_to_base: RigidTransform::from_translation(Vec3::new(0.0, 0.0, -50.0)),
        };
        let out = project_view(&src, &src_view, &dst_view);
        assert!(out.is_valid(0));
        assert_eq!(out.probabilities(0), &[0.0, 1.0]);
        assert!((out.depth(0) - 51.0).abs() < 1e-4);
    }

    #[test]
    fn slot_orders_and_missing_camera() {
        let m = AugmentedMap::empty(2, 2, 2);
        let all: Vec<_> = CameraId::ALL.iter().map(|&c| (c, m.clone())).collect();
        let s = sort_stack(CameraId::Usm4, all.clone()).unwrap();
        assert_eq!(s.order, [CameraId::Usm4, CameraId::Usm1, CameraId::Op, CameraId::Base]);
        assert_eq!(s, sort_stack(CameraId::Usm4, all.clone()).unwrap());
        assert_eq!(
            sort_stack(CameraId::Op, all[..3].to_vec()),
            Err(MvpmError::MissingCamera(CameraId::Base))
        );
    }

    #[test]
    fn fixed_merge_arithmetic() {
        let a = single_slot(2, &[0.9, 0.1]);
        let b = single_slot(2, &[0.2, 0.8]);
        let e = AugmentedMap::empty(1, 1, 2);
        let s = stack_of([a.clone(), b, e.clone(), e.clone()]);
        let mean = merge_fixed(&s, FixedMerge::Mean);
        assert!((mean.pixel(0)[0] - 0.55).abs() < 1e-6);
        let max = merge_fixed(&s, FixedMerge::Max);
        assert!((max.pixel(0)[0] - 0.9 / 1.7).abs() < 1e-6);
        assert!((max.pixel(0)[1] - 0.8 / 1.7).abs() < 1e-6);
        let one = merge_fixed(&stack_of([a.clone(), e.clone(), e.clone(), e.clone()]), FixedMerge::Max);
        assert_eq!(one.pixel(0), a.probabilities(0));
        let same = merge_fixed(
            &stack_of([a.clone(), a.clone(), a.clone(), a.clone()]),
            FixedMerge::Mean,
        );
        for (x, y) in same.pixel(0).iter().zip(a.probabilities(0)) {
            assert!((x - y).abs() < 1e-7);
        }
        let none = merge_fixed(&stack_of([e.clone(), e.clone(), e.clone(), e]), FixedMerge::Mean);
        assert!(!none.validity()[0]);
    }

    #[test]
    fn predict_tie_rule_and_one_hot() {
        assert!(predict(&ConfidenceMap::uniform(3, 2, 4))
            .labels()
            .iter()
            .all(|&l| l == 0));
        let gt = LabelMap::new(3, 1, 3, vec![2, 0, 1]).unwrap();
        assert_eq!(predict(&ConfidenceMap::one_hot(&gt)), gt);
    }
}
