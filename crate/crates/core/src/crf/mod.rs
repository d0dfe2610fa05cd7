//! Fully connected CRF over 3-D points with Potts compatibility and
//! mean-field inference. Pairwise messages come from a permutohedral
//! lattice or, for reference, from exact `O(N²)` sums.

mod fusion;
mod lattice;

pub use fusion::{fuse_views, FusionInput};
pub use lattice::{brute_force_filter, PermutohedralLattice, MAX_DIMENSION};

use crate::geometry::Vec3;
use crate::mvpm::argmax;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CrfError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite feature value")]
    NonFinite,
    #[error("empty point set")]
    Empty,
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfParams {
    pub w_app: f64,
    /// Spatial bandwidth of the appearance kernel in meters.
    pub theta_pos: f64,
    /// Intensity bandwidth of the appearance kernel.
    pub theta_int: f64,
    pub w_smooth: f64,
    /// Bandwidth of the smoothness kernel in meters.
    pub theta_smooth: f64,
    pub iterations: usize,
    #[serde(default)]
    pub normalization: Normalization,
}

/// Kernel normalization: `Symmetric` uses `k_ij / sqrt(n_i n_j)` with
/// `n_i = Σ_j k_ij`, so message strength does not grow with point density.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    #[default]
    Symmetric,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            w_app: 10.0,
            theta_pos: 0.3,
            theta_int: 20.0,
            w_smooth: 3.0,
            theta_smooth: 0.1,
            iterations: 5,
            normalization: Normalization::Symmetric,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<(), CrfError> {
        let bands = [self.theta_pos, self.theta_int, self.theta_smooth];
        if bands.iter().any(|b| !(*b > 0.0) || !b.is_finite()) {
            return Err(CrfError::InvalidParams("bandwidths must be positive".into()));
        }
        if !self.w_app.is_finite() || !self.w_smooth.is_finite() {
            return Err(CrfError::InvalidParams("kernel weights must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterBackend {
    Lattice,
    BruteForce,
}

/// Smallest probability before taking the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Negative log probabilities, `n × classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct UnaryField {
    classes: usize,
    data: Vec<f64>,
}

impl UnaryField {
    pub fn from_probabilities(probs: &[f64], classes: usize) -> Result<Self, CrfError> {
        if classes == 0 || !probs.len().is_multiple_of(classes) {
            return Err(CrfError::Shape(format!(
                "{} probabilities for {classes} classes",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(CrfError::NonFinite);
        }
        Ok(Self {
            classes,
            data: probs.iter().map(|p| -p.max(PROB_FLOOR).ln()).collect(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }
}

/// One Gaussian kernel with its scaled features.
pub struct Kernel {
    weight: f64,
    features: Vec<f64>,
    d: usize,
    lattice: Option<PermutohedralLattice>,
    /// Per-point factor `1/sqrt(n_i)`, all ones when unnormalized.
    scale: Vec<f64>,
}

impl Kernel {
    pub fn new(
        weight: f64,
        features: Vec<f64>,
        d: usize,
        backend: FilterBackend,
        normalization: Normalization,
    ) -> Result<Self, CrfError> {
        let lattice = match backend {
            FilterBackend::Lattice => Some(PermutohedralLattice::new(&features, d)?),
            FilterBackend::BruteForce => {
                if features.iter().any(|f| !f.is_finite()) {
                    return Err(CrfError::NonFinite);
                }
                None
            }
        };
        let n = features.len() / d;
        let mut kernel = Self {
            weight,
            features,
            d,
            lattice,
            scale: vec![1.0; n],
        };
        if normalization == Normalization::Symmetric {
            kernel.scale = kernel
                .filter(&vec![1.0; n], 1)?
                .iter()
                .map(|m| 1.0 / m.sqrt())
                .collect();
        }
        Ok(kernel)
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    fn filter(&self, values: &[f64], k: usize) -> Result<Vec<f64>, CrfError> {
        match &self.lattice {
            Some(l) => l.filter(values, k),
            None => Ok(brute_force_filter(&self.features, self.d, values, k)),
        }
    }

    /// `Σ_{j≠i} k̃_ij v_j` for rows of `k` values, with `k̃` the
    /// normalized kernel.
    pub fn message(&self, values: &[f64], k: usize) -> Result<Vec<f64>, CrfError> {
        let scaled: Vec<f64> = values
            .chunks_exact(k)
            .zip(&self.scale)
            .flat_map(|(row, s)| row.iter().map(move |v| v * s))
            .collect();
        let mut out = self.filter(&scaled, k)?;
        for ((o, row), s) in out.chunks_exact_mut(k).zip(scaled.chunks_exact(k)).zip(&self.scale) {
            for (x, v) in o.iter_mut().zip(row) {
                *x = (*x - v) * s;
            }
        }
        Ok(out)
    }
}

/// Appearance kernel on (position, intensity) and smoothness kernel on
/// position, as configured by `params`.
pub fn build_kernels(
    positions: &[Vec3],
    intensity: &[f64],
    params: &CrfParams,
    backend: FilterBackend,
) -> Result<Vec<Kernel>, CrfError> {
    params.validate()?;
    if positions.len() != intensity.len() {
        return Err(CrfError::Shape("positions vs intensity".into()));
    }
    let mut kernels = Vec::new();
    if params.w_app != 0.0 {
        let f = positions
            .iter()
            .zip(intensity)
            .flat_map(|(p, &i)| {
                let s = 1.0 / params.theta_pos;
                [p.x * s, p.y * s, p.z * s, i / params.theta_int]
            })
            .collect();
        kernels.push(Kernel::new(params.w_app, f, 4, backend, params.normalization)?);
    }
    if params.w_smooth != 0.0 {
        let s = 1.0 / params.theta_smooth;
        let f = positions.iter().flat_map(|p| [p.x * s, p.y * s, p.z * s]).collect();
        kernels.push(Kernel::new(params.w_smooth, f, 3, backend, params.normalization)?);
    }
    Ok(kernels)
}

fn softmax_rows(logits: &mut [f64], c: usize) {
    for row in logits.chunks_exact_mut(c) {
        crate::mvpm::network::softmax_in_place(row);
    }
}

/// `softmax(−unary)`, the initial marginals.
pub fn unary_marginals(unary: &UnaryField) -> Vec<f64> {
    let mut q: Vec<f64> = unary.data.iter().map(|u| -u).collect();
    softmax_rows(&mut q, unary.classes);
    q
}

/// One parallel mean-field update with Potts compatibility.
pub fn mean_field_step(q: &[f64], unary: &UnaryField, kernels: &[Kernel]) -> Result<Vec<f64>, CrfError> {
    let c = unary.classes;
    if q.len() != unary.data.len() {
        return Err(CrfError::Shape("marginals vs unary".into()));
    }
    let mut logits: Vec<f64> = unary.data.iter().map(|u| -u).collect();
    for k in kernels {
        // Potts: penalising disagreement equals rewarding agreement up to a
        // per-row constant, which the softmax removes.
        for (l, m) in logits.iter_mut().zip(k.message(q, c)?) {
            *l += k.weight * m;
        }
    }
    softmax_rows(&mut logits, c);
    Ok(logits)
}

/// Marginals after `iterations` mean-field updates.
pub fn mean_field(unary: &UnaryField, kernels: &[Kernel], iterations: usize) -> Result<Vec<f64>, CrfError> {
    let mut q = unary_marginals(unary);
    for _ in 0..iterations {
        q = mean_field_step(&q, unary, kernels)?;
    }
    Ok(q)
}

/// Labels of every point after CRF inference.
pub fn run_inference(
    positions: &[Vec3],
    intensity: &[f64],
    unary: &UnaryField,
    params: &CrfParams,
    backend: FilterBackend,
) -> Result<Vec<u8>, CrfError> {
    if positions.is_empty() {
        return Err(CrfError::Empty);
    }
    if unary.len() != positions.len() {
        return Err(CrfError::Shape("unary vs points".into()));
    }
    let kernels = build_kernels(positions, intensity, params, backend)?;
    let q = mean_field(unary, &kernels, params.iterations)?;
    Ok(q.chunks_exact(unary.classes).map(|r| argmax(r) as u8).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_class(p: &[f64]) -> UnaryField {
        let probs: Vec<f64> = p.iter().flat_map(|&a| [a, 1.0 - a]).collect();
        UnaryField::from_probabilities(&probs, 2).unwrap()
    }

    #[test]
    fn zero_weights_give_unary_softmax() {
        let unary = two_class(&[0.3, 0.8, 0.55]);
        let pos = [Vec3::zeros(), Vec3::new(0.05, 0.0, 0.0), Vec3::new(0.1, 0.0, 0.0)];
        let params = CrfParams {
            w_app: 0.0,
            w_smooth: 0.0,
            ..Default::default()
        };
        let kernels = build_kernels(&pos, &[0.0; 3], &params, FilterBackend::Lattice).unwrap();
        let q = mean_field_step(&[0.5; 6], &unary, &kernels).unwrap();
        for (a, b) in q.iter().zip(unary_marginals(&unary)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((q[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_keep_the_unary_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 50;
        let pos: Vec<Vec3> = (0..n).map(|_| Vec3::new(rng.random(), rng.random(), 0.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let params = CrfParams {
            iterations: 0,
            ..Default::default()
        };
        let labels = run_inference(&pos, &vec![1.0; n], &two_class(&p), &params, FilterBackend::Lattice).unwrap();
        for (l, &pi) in labels.iter().zip(&p) {
            assert_eq!(*l, u8::from(pi < 0.5));
        }
    }

    /// Two points one bandwidth apart, `K = exp(−1/2)`. The class-0
    /// marginal of each point follows `q_i = σ(a_i + w·c·(2 q_j − 1))` with
    /// coupling `c = K`, or `K/(1+K)` under symmetric normalization
    /// (`n_i = 1 + K`). Solved by bisection on `q_i = g_i(g_j(q_i))`.
    fn check_two_point(normalization: Normalization, coupling: f64) {
        let (pa, pb, w) = (0.8f64, 0.35f64, 4.0f64);
        let unary = two_class(&[pa, pb]);
        let kernels = vec![Kernel::new(w, vec![0.0, 1.0], 1, FilterBackend::BruteForce, normalization).unwrap()];
        let q = mean_field(&unary, &kernels, 200).unwrap();

        let sigma = |x: f64| 1.0 / (1.0 + (-x).exp());
        let (a, b) = ((pa / (1.0 - pa)).ln(), (pb / (1.0 - pb)).ln());
        let gi = |qj: f64| sigma(a + w * coupling * (2.0 * qj - 1.0));
        let gj = |qi: f64| sigma(b + w * coupling * (2.0 * qi - 1.0));
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if gi(gj(mid)) > mid {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let qi = 0.5 * (lo + hi);
        assert!((q[0] - qi).abs() < 1e-3, "{} vs {qi}", q[0]);
        assert!((q[2] - gj(qi)).abs() < 1e-3);
    }

    #[test]
    fn two_point_fixed_point() {
        let k = (-0.5f64).exp();
        check_two_point(Normalization::None, k);
        check_two_point(Normalization::Symmetric, k / (1.0 + k));
    }

    #[test]
    fn marginals_stay_on_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 300;
        let pos: Vec<Vec3> = (0..n)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let inten: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..50.0)).collect();
        let probs: Vec<f64> = (0..n * 3)
            .map(|_| rng.random::<f64>())
            .collect::<Vec<_>>()
            .chunks(3)
            .flat_map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(move |v| v / s).collect::<Vec<_>>()
            })
            .collect();
        let unary = UnaryField::from_probabilities(&probs, 3).unwrap();
        let kernels = build_kernels(&pos, &inten, &CrfParams::default(), FilterBackend::Lattice).unwrap();
        let mut q = unary_marginals(&unary);
        for _ in 0..5 {
            q = mean_field_step(&q, &unary, &kernels).unwrap();
            for row in q.chunks(3) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn strong_one_hot_unaries_are_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 400;
        let pos: Vec<Vec3> = (0..n).map(|_| Vec3::new(rng.random(), rng.random(), 0.0)).collect();
        let truth: Vec<u8> = pos.iter().map(|p| u8::from(p.x > 0.5)).collect();
        let probs: Vec<f64> = truth
            .iter()
            .flat_map(|&t| if t == 0 { [1.0, 0.0] } else { [0.0, 1.0] })
            .collect();
        let unary = UnaryField::from_probabilities(&probs, 2).unwrap();
        let labels = run_inference(
            &pos,
            &vec![10.0; n],
            &unary,
            &CrfParams::default(),
            FilterBackend::Lattice,
        )
        .unwrap();
        assert_eq!(labels, truth);
    }

    /// Flat 40×40 grid (2.5 cm pitch) split into two classes, 10 % of the
    /// points with confidently wrong unaries.
    fn salt_and_pepper(seed: u64) -> (Vec<Vec3>, Vec<u8>, Vec<bool>, UnaryField) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pos = Vec::new();
        let mut truth = Vec::new();
        let mut flipped = Vec::new();
        let mut probs = Vec::new();
        for y in 0..40 {
            for x in 0..40 {
                pos.push(Vec3::new(x as f64 * 0.025, y as f64 * 0.025, 1.0));
                let t = u8::from(x >= 20);
                let flip = rng.random::<f64>() < 0.1;
                let shown = if flip { 1 - t } else { t };
                probs.extend(if shown == 0 { [0.7, 0.3] } else { [0.3, 0.7] });
                truth.push(t);
                flipped.push(flip);
            }
        }
        (pos, truth, flipped, UnaryField::from_probabilities(&probs, 2).unwrap())
    }

    #[test]
    fn salt_and_pepper_is_removed() {
        let (pos, truth, flipped, unary) = salt_and_pepper(4);
        let labels = run_inference(
            &pos,
            &vec![10.0; pos.len()],
            &unary,
            &CrfParams::default(),
            FilterBackend::Lattice,
        )
        .unwrap();
        let corrupted = flipped.iter().filter(|f| **f).count();
        let restored = (0..pos.len()).filter(|&i| flipped[i] && labels[i] == truth[i]).count();
        assert!(restored as f64 >= 0.9 * corrupted as f64, "{restored}/{corrupted}");
    }

    #[test]
    fn lattice_and_brute_force_agree() {
        let (pos, _, _, unary) = salt_and_pepper(5);
        let pos = &pos[..1600];
        let inten: Vec<f64> = pos.iter().map(|p| 10.0 + 20.0 * p.y).collect();
        let params = CrfParams::default();
        let a = run_inference(pos, &inten, &unary, &params, FilterBackend::Lattice).unwrap();
        let b = run_inference(pos, &inten, &unary, &params, FilterBackend::BruteForce).unwrap();
        let agree = a.iter().zip(&b).filter(|(x, y)| x == y).count();
        assert!(agree as f64 >= 0.99 * a.len() as f64, "{agree}/{}", a.len());
    }

    #[test]
    fn empty_cloud_is_an_error() {
        let unary = UnaryField::from_probabilities(&[], 2).unwrap();
        assert_eq!(
            run_inference(&[], &[], &unary, &CrfParams::default(), FilterBackend::Lattice),
            Err(CrfError::Empty)
        );
    }
}
