use super::SimError;
use crate::mvpm::{ConfidenceMap, LabelMap};
use crate::rng::stream;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Degradation applied to ground truth to imitate a per-view segmentation
/// backbone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceCorruption {
    /// Probability that a pixel in the boundary band takes a neighbouring
    /// label.
    pub boundary_flip: f64,
    /// Half-width of the boundary band (pixels).
    pub band: usize,
    /// Box blur radius (pixels).
    pub blur_radius: usize,
    /// Exponent applied to the blurred probabilities before renormalizing:
    /// 1 keeps them, 0 gives the uniform distribution.
    pub reliability: f64,
    /// Number of discs relabeled with a single wrong class.
    pub misses: usize,
    /// Disc radius as a fraction of the image width.
    pub miss_radius: f64,
    pub seed: u64,
}

impl ConfidenceCorruption {
    pub fn none() -> Self {
        Self {
            boundary_flip: 0.0,
            band: 0,
            blur_radius: 0,
            reliability: 1.0,
            misses: 0,
            miss_radius: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.boundary_flip)
            || !(self.reliability >= 0.0 && self.reliability.is_finite())
            || !(self.miss_radius >= 0.0 && self.miss_radius.is_finite())
        {
            return Err(SimError::InvalidCorruption(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Labels that differ from pixel `i`'s within its (2r+1)² window.
fn differing_neighbours(labels: &LabelMap, i: usize, r: usize, out: &mut Vec<u8>) {
    out.clear();
    let (w, h) = (labels.width(), labels.height());
    let (x, y) = (i % w, i / w);
    let l = labels.get(i);
    for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
        for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
            let m = labels.get(yy * w + xx);
            if m != l {
                out.push(m);
            }
        }
    }
}

/// Mean over a clamped (2r+1)-wide window along one axis.
fn box_blur(data: &mut [f64], w: usize, h: usize, c: usize, r: usize, horizontal: bool) {
    let src = data.to_vec();
    let (len, lines) = if horizontal { (w, h) } else { (h, w) };
    let at = |line: usize, k: usize| if horizontal { line * w + k } else { k * w + line };
    for line in 0..lines {
        for k in 0..len {
            let (a, b) = (k.saturating_sub(r), (k + r + 1).min(len));
            for ch in 0..c {
                let s: f64 = (a..b).map(|j| src[at(line, j) * c + ch]).sum();
                data[at(line, k) * c + ch] = s / (b - a) as f64;
            }
        }
    }
}

/// Ground truth → boundary flips → missed regions → box blur → tempering.
pub fn generate_confidence(gt: &LabelMap, corruption: &ConfidenceCorruption) -> Result<ConfidenceMap, SimError> {
    corruption.validate()?;
    let (w, h, c) = (gt.width(), gt.height(), gt.classes());
    let mut rng = stream(corruption.seed, 0x636f_6e66, 0);
    let mut labels = gt.labels().to_vec();

    if corruption.boundary_flip > 0.0 && corruption.band > 0 {
        let mut nb = Vec::new();
        for (i, l) in labels.iter_mut().enumerate() {
            differing_neighbours(gt, i, corruption.band, &mut nb);
            if !nb.is_empty() && rng.random::<f64>() < corruption.boundary_flip {
                *l = nb[rng.random_range(0..nb.len())];
            }
        }
    }

    for _ in 0..corruption.misses {
        let r = corruption.miss_radius * w as f64;
        let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let class = rng.random_range(0..c) as u8;
        for (i, l) in labels.iter_mut().enumerate() {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            if (x - cx).powi(2) + (y - cy).powi(2) <= r * r {
                *l = class;
            }
        }
    }

    let mut probs = vec![0.0f64; w * h * c];
    for (i, &l) in labels.iter().enumerate() {
        probs[i * c + l as usize] = 1.0;
    }
    if corruption.blur_radius > 0 {
        box_blur(&mut probs, w, h, c, corruption.blur_radius, true);
        box_blur(&mut probs, w, h, c, corruption.blur_radius, false);
    }

    let s = corruption.reliability;
    let mut data = Vec::with_capacity(probs.len());
    for row in probs.chunks_exact(c) {
        let tempered: Vec<f64> = row.iter().map(|&p| if s == 0.0 { 1.0 } else { p.powf(s) }).collect();
        let z: f64 = tempered.iter().sum();
        data.extend(tempered.iter().map(|p| (p / z) as f32));
    }
    Ok(ConfidenceMap::new(w, h, c, data, vec![true; w * h]).expect("normalized rows"))
}
