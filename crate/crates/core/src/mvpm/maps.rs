//! Per-pixel class maps shared by fusion, the CRF and the metrics.

use super::MvpmError;
use crate::rig::CameraId;

/// Tolerance for simplex membership of stored probabilities.
pub const SIMPLEX_TOL: f32 = 1e-5;

/// Class index per pixel; class 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    classes: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, classes: usize, labels: Vec<u8>) -> Result<Self, MvpmError> {
        if labels.len() != width * height {
            return Err(MvpmError::DimensionMismatch(format!(
                "{} labels for {width}x{height}",
                labels.len()
            )));
        }
        if classes == 0 || classes > 256 {
            return Err(MvpmError::DimensionMismatch(format!("{classes} classes")));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(MvpmError::LabelOutOfRange(*bad as usize, classes));
        }
        Ok(Self {
            width,
            height,
            classes,
            labels,
        })
    }

    pub fn filled(width: usize, height: usize, classes: usize, label: u8) -> Self {
        Self::new(width, height, classes, vec![label; width * height]).expect("label in range")
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
    pub fn get(&self, idx: usize) -> u8 {
        self.labels[idx]
    }
    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-pixel class probabilities (row-major, classes interleaved).
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    width: usize,
    height: usize,
    classes: usize,
    data: Vec<f32>,
    valid: Vec<bool>,
}

impl ConfidenceMap {
    /// Every valid pixel must lie on the probability simplex.
    pub fn new(
        width: usize,
        height: usize,
        classes: usize,
        data: Vec<f32>,
        valid: Vec<bool>,
    ) -> Result<Self, MvpmError> {
        let n = width * height;
        if data.len() != n * classes || valid.len() != n || classes == 0 {
            return Err(MvpmError::DimensionMismatch(format!(
                "confidence {width}x{height}x{classes}"
            )));
        }
        for (i, row) in data.chunks_exact(classes).enumerate() {
            if valid[i] && !on_simplex(row) {
                return Err(MvpmError::NotOnSimplex(i));
            }
        }
        Ok(Self {
            width,
            height,
            classes,
            data,
            valid,
        })
    }

    pub fn uniform(width: usize, height: usize, classes: usize) -> Self {
        Self {
            width,
            height,
            classes,
            data: vec![1.0 / classes as f32; width * height * classes],
            valid: vec![true; width * height],
        }
    }

    pub fn one_hot(labels: &LabelMap) -> Self {
        let c = labels.classes();
        let mut data = vec![0.0; labels.len() * c];
        for (i, &l) in labels.labels().iter().enumerate() {
            data[i * c + l as usize] = 1.0;
        }
        Self {
            width: labels.width(),
            height: labels.height(),
            classes: c,
            data,
            valid: vec![true; labels.len()],
        }
    }

    pub(crate) fn from_parts_unchecked(
        width: usize,
        height: usize,
        classes: usize,
        data: Vec<f32>,
        valid: Vec<bool>,
    ) -> Self {
        Self {
            width,
            height,
            classes,
            data,
            valid,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn validity(&self) -> &[bool] {
        &self.valid
    }
    pub fn pixel(&self, idx: usize) -> &[f32] {
        &self.data[idx * self.classes..(idx + 1) * self.classes]
    }
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
    pub fn with_validity(mut self, valid: &[bool]) -> Self {
        for (v, m) in self.valid.iter_mut().zip(valid) {
            *v &= *m;
        }
        self
    }
}

pub(crate) fn on_simplex(row: &[f32]) -> bool {
    let mut sum = 0.0f64;
    for &p in row {
        if !(-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(&p) {
            return false;
        }
        sum += p as f64;
    }
    (sum - 1.0).abs() <= SIMPLEX_TOL as f64
}

/// Confidence with depth appended as channel `C` (meters).
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedMap {
    width: usize,
    height: usize,
    classes: usize,
    data: Vec<f32>,
    valid: Vec<bool>,
}

impl AugmentedMap {
    pub(crate) fn empty(width: usize, height: usize, classes: usize) -> Self {
        Self {
            width,
            height,
            classes,
            data: vec![0.0; width * height * (classes + 1)],
            valid: vec![false; width * height],
        }
    }

    pub(crate) fn from_parts_unchecked(
        width: usize,
        height: usize,
        classes: usize,
        data: Vec<f32>,
        valid: Vec<bool>,
    ) -> Self {
        Self {
            width,
            height,
            classes,
            data,
            valid,
        }
    }

    pub fn new(
        width: usize,
        height: usize,
        classes: usize,
        data: Vec<f32>,
        valid: Vec<bool>,
    ) -> Result<Self, MvpmError> {
        let n = width * height;
        if data.len() != n * (classes + 1) || valid.len() != n || classes == 0 {
            return Err(MvpmError::DimensionMismatch(format!(
                "augmented {width}x{height}x{}",
                classes + 1
            )));
        }
        for (i, row) in data.chunks_exact(classes + 1).enumerate() {
            if valid[i] && (!on_simplex(&row[..classes]) || !(row[classes] > 0.0)) {
                return Err(MvpmError::NotOnSimplex(i));
            }
        }
        Ok(Self {
            width,
            height,
            classes,
            data,
            valid,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn channels(&self) -> usize {
        self.classes + 1
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn validity(&self) -> &[bool] {
        &self.valid
    }
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
    pub fn probabilities(&self, idx: usize) -> &[f32] {
        let c = self.classes + 1;
        &self.data[idx * c..idx * c + self.classes]
    }
    pub fn depth(&self, idx: usize) -> f32 {
        self.data[idx * (self.classes + 1) + self.classes]
    }
    pub fn is_valid(&self, idx: usize) -> bool {
        self.valid[idx]
    }
    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
    pub(crate) fn valid_mut(&mut self) -> &mut [bool] {
        &mut self.valid
    }
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Four augmented maps in one target camera's image plane. Slot 0 is the
/// target itself; the rest follow [`CameraId::slot_order`].
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedStack {
    pub target: CameraId,
    pub order: [CameraId; 4],
    pub slots: [AugmentedMap; 4],
}

impl ProjectedStack {
    pub fn width(&self) -> usize {
        self.slots[0].width()
    }
    pub fn height(&self) -> usize {
        self.slots[0].height()
    }
    pub fn classes(&self) -> usize {
        self.slots[0].classes()
    }

    /// Copy with the slots of `cameras` marked invalid and zeroed.
    pub fn without(&self, cameras: &[CameraId]) -> ProjectedStack {
        let mut out = self.clone();
        for (slot, cam) in out.slots.iter_mut().zip(self.order) {
            if cameras.contains(&cam) {
                *slot = AugmentedMap::empty(slot.width(), slot.height(), slot.classes());
            }
        }
        out
    }

    /// Slot-0 probabilities as a confidence map.
    pub fn target_confidence(&self) -> ConfidenceMap {
        let s = &self.slots[0];
        let c = s.classes();
        let n = s.pixel_count();
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n {
            data.extend_from_slice(s.probabilities(i));
        }
        ConfidenceMap::from_parts_unchecked(s.width(), s.height(), c, data, s.validity().to_vec())
    }
}
