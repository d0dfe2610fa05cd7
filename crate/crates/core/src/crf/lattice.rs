//! Permutohedral lattice for approximate high-dimensional Gaussian
//! filtering (splat, blur along the `d+1` lattice directions, slice).

use super::CrfError;
use std::collections::HashMap;

/// Key coordinates are packed into 21-bit fields of a `u128`.
pub const MAX_DIMENSION: usize = 6;
const KEY_BITS: u32 = 21;
const KEY_LIMIT: i64 = 1 << (KEY_BITS - 1);

/// Vertex budget, per occupied vertex, for the two-pass refinement.
const REFINED_BUDGET: usize = 64;

/// Feature scale relative to `sqrt(passes)` that best matches the unit
/// Gaussian, indexed by `[passes − 1][d − 1]`.
const BANDWIDTH_CORRECTION: [[f64; MAX_DIMENSION]; 2] = [
    [1.03, 1.03, 1.03, 1.03, 1.03, 1.03],
    [0.963, 0.966, 0.967, 0.967, 0.968, 0.968],
];

type Key = u128;

fn pack(key: &[i64]) -> Key {
    key.iter().fold(0, |acc, &c| {
        (acc << KEY_BITS) | ((c + KEY_LIMIT) as u128 & ((1 << KEY_BITS) - 1))
    })
}

/// Lattice step along direction `j` (the `d+1` directions sum to zero).
fn step(key: &[i64], j: usize, sign: i64, out: &mut [i64]) {
    let d = key.len();
    for (o, k) in out.iter_mut().zip(key) {
        *o = k - sign;
    }
    if j < d {
        out[j] = key[j] + sign * d as i64;
    }
}

#[derive(Clone, Debug)]
pub struct PermutohedralLattice {
    d: usize,
    n: usize,
    /// Blur passes per lattice direction (1 or 2).
    passes: usize,
    /// Lattice vertex of each (point, simplex corner), `n × (d+1)`.
    offsets: Vec<usize>,
    /// Barycentric weight of each (point, simplex corner).
    weights: Vec<f64>,
    /// Per blur direction and vertex: the two neighbours, or `usize::MAX`
    /// on the rim of the filled-in region.
    neighbors: Vec<[usize; 2]>,
    occupied: usize,
    vertices: usize,
    /// Output scale turning lattice responses into Gaussian sums.
    norm: f64,
    /// Each point's own contribution to its lattice response, per unit value.
    self_response: Vec<f64>,
}

impl PermutohedralLattice {
    /// `features` holds `n` rows of `d` values, already divided by the
    /// kernel bandwidths.
    pub fn new(features: &[f64], d: usize) -> Result<Self, CrfError> {
        if d == 0 || d > MAX_DIMENSION || features.is_empty() || !features.len().is_multiple_of(d) {
            return Err(CrfError::Shape(format!(
                "{} feature values for dimension {d}",
                features.len()
            )));
        }
        if features.iter().any(|f| !f.is_finite()) {
            return Err(CrfError::NonFinite);
        }
        let occupied_bound = features.len() / d * (d + 1);
        match Self::build(features, d, 2, Some(REFINED_BUDGET * occupied_bound))? {
            Some(lat) => Ok(lat),
            None => Ok(Self::build(features, d, 1, None)?.expect("unbounded build")),
        }
    }

    /// Splats with features scaled for `passes` blur passes and fills in
    /// every vertex the blur can reach; gives up past `budget` vertices.
    fn build(features: &[f64], d: usize, passes: usize, budget: Option<usize>) -> Result<Option<Self>, CrfError> {
        let n = features.len() / d;
        let d1 = d + 1;
        let s = (passes as f64).sqrt() * BANDWIDTH_CORRECTION[passes - 1][d - 1];
        let scale: Vec<f64> = (0..d)
            .map(|i| s * (2.0f64 / 3.0).sqrt() * d1 as f64 / (((i + 1) * (i + 2)) as f64).sqrt())
            .collect();
        let canonical: Vec<i64> = (0..d1)
            .flat_map(|i| (0..d1).map(move |j| if j <= d - i { i as i64 } else { i as i64 - d1 as i64 }))
            .collect();

        let mut table: HashMap<Key, usize> = HashMap::new();
        let mut keys: Vec<i64> = Vec::new();
        let mut offsets = vec![0usize; n * d1];
        let mut weights = vec![0.0f64; n * d1];
        let mut elevated = vec![0.0f64; d1];
        let mut rem0 = vec![0i64; d1];
        let mut rank = vec![0i64; d1];
        let mut bary = vec![0.0f64; d + 2];
        let mut key = vec![0i64; d];
        let down = 1.0 / d1 as f64;

        for p in 0..n {
            let f = &features[p * d..(p + 1) * d];
            let mut sm = 0.0;
            for j in (1..=d).rev() {
                let cf = f[j - 1] * scale[j - 1];
                elevated[j] = sm - j as f64 * cf;
                sm += cf;
            }
            elevated[0] = sm;

            let mut sum = 0i64;
            for i in 0..d1 {
                let v = elevated[i] * down;
                let up = v.ceil() as i64 * d1 as i64;
                let dn = v.floor() as i64 * d1 as i64;
                rem0[i] = if up as f64 - elevated[i] < elevated[i] - dn as f64 {
                    up
                } else {
                    dn
                };
                sum += rem0[i];
            }
            let sum = sum / d1 as i64;

            rank.iter_mut().for_each(|r| *r = 0);
            for i in 0..d {
                let di = elevated[i] - rem0[i] as f64;
                for j in i + 1..d1 {
                    if di < elevated[j] - rem0[j] as f64 {
                        rank[i] += 1;
                    } else {
                        rank[j] += 1;
                    }
                }
            }
            for i in 0..d1 {
                rank[i] += sum;
                if rank[i] < 0 {
                    rank[i] += d1 as i64;
                    rem0[i] += d1 as i64;
                } else if rank[i] > d as i64 {
                    rank[i] -= d1 as i64;
                    rem0[i] -= d1 as i64;
                }
            }

            bary.iter_mut().for_each(|b| *b = 0.0);
            for i in 0..d1 {
                let v = (elevated[i] - rem0[i] as f64) * down;
                let r = (d as i64 - rank[i]) as usize;
                bary[r] += v;
                bary[r + 1] -= v;
            }
            bary[0] += 1.0 + bary[d1];

            for r in 0..d1 {
                for i in 0..d {
                    key[i] = rem0[i] + canonical[r * d1 + rank[i] as usize];
                }
                if key.iter().any(|k| k.abs() >= KEY_LIMIT - 2 * (d1 * passes) as i64) {
                    return Err(CrfError::Shape("feature range exceeds the lattice key width".into()));
                }
                let next = table.len();
                let idx = *table.entry(pack(&key)).or_insert_with(|| {
                    keys.extend_from_slice(&key);
                    next
                });
                offsets[p * d1 + r] = idx;
                weights[p * d1 + r] = bary[r];
            }
        }
        let occupied = table.len();

        // Fill-in: the blur reaches every vertex within `passes` steps along
        // each direction of an occupied one.
        let mut nb = vec![0i64; d];
        for j in 0..d1 {
            for _ in 0..passes {
                let current = table.len();
                for v in 0..current {
                    for sign in [1, -1] {
                        step(&keys[v * d..(v + 1) * d], j, sign, &mut nb);
                        let next = table.len();
                        table.entry(pack(&nb)).or_insert_with(|| {
                            keys.extend_from_slice(&nb);
                            next
                        });
                    }
                }
                if budget.is_some_and(|b| table.len() > b) {
                    return Ok(None);
                }
            }
        }
        let m = table.len();
        let mut neighbors = vec![[usize::MAX; 2]; d1 * m];
        for j in 0..d1 {
            for v in 0..m {
                let k = &keys[v * d..(v + 1) * d];
                let mut pair = [usize::MAX; 2];
                for (slot, sign) in pair.iter_mut().zip([1, -1]) {
                    step(k, j, sign, &mut nb);
                    if let Some(&i) = table.get(&pack(&nb)) {
                        *slot = i;
                    }
                }
                neighbors[j * m + v] = pair;
            }
        }

        let norm = s.powi(d as i32) / (lattice_gain(d) * 2f64.powi(((passes - 1) * d1) as i32));
        let blur = blur_kernel(d, passes);
        let mut self_response = vec![0.0; n];
        let mut diff = vec![0i64; d];
        for (p, out) in self_response.iter_mut().enumerate() {
            let corners = &offsets[p * d1..(p + 1) * d1];
            let w = &weights[p * d1..(p + 1) * d1];
            let mut acc = 0.0;
            for r in 0..d1 {
                for q in 0..d1 {
                    let (a, b) = (corners[r], corners[q]);
                    for c in 0..d {
                        diff[c] = keys[b * d + c] - keys[a * d + c];
                    }
                    acc += w[r] * w[q] * blur.get(&pack(&diff)).copied().unwrap_or(0.0);
                }
            }
            *out = acc * norm;
        }

        Ok(Some(Self {
            d,
            n,
            passes,
            offsets,
            weights,
            neighbors,
            occupied,
            vertices: m,
            norm,
            self_response,
        }))
    }

    pub fn dimension(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Blur passes per direction chosen for this point set.
    pub fn passes(&self) -> usize {
        self.passes
    }

    /// Vertices touched by splatting.
    pub fn occupied_count(&self) -> usize {
        self.occupied
    }

    /// Vertices including the filled-in rim.
    pub fn vertex_count(&self) -> usize {
        self.vertices
    }

    /// Barycentric weights of point `i` over its enclosing simplex.
    pub fn barycentric(&self, i: usize) -> &[f64] {
        let d1 = self.d + 1;
        &self.weights[i * d1..(i + 1) * d1]
    }

    /// Lattice vertices of point `i`'s enclosing simplex.
    pub fn simplex(&self, i: usize) -> &[usize] {
        let d1 = self.d + 1;
        &self.offsets[i * d1..(i + 1) * d1]
    }

    /// Approximates `Σ_j exp(−‖f_i − f_j‖²/2) · v_j` for rows of `k` values.
    /// The `j = i` term is exact.
    pub fn filter(&self, values: &[f64], k: usize) -> Result<Vec<f64>, CrfError> {
        if values.len() != self.n * k {
            return Err(CrfError::Shape(format!(
                "{} values for {} points × {k}",
                values.len(),
                self.n
            )));
        }
        let d1 = self.d + 1;
        let m = self.vertices;
        let mut grid = vec![0.0; m * k];
        for p in 0..self.n {
            let v = &values[p * k..(p + 1) * k];
            for r in 0..d1 {
                let o = self.offsets[p * d1 + r] * k;
                let w = self.weights[p * d1 + r];
                for (g, x) in grid[o..o + k].iter_mut().zip(v) {
                    *g += w * x;
                }
            }
        }
        let mut next = vec![0.0; m * k];
        for j in 0..d1 {
            for _ in 0..self.passes {
                for i in 0..m {
                    let [a, b] = self.neighbors[j * m + i];
                    for c in 0..k {
                        let va = if a == usize::MAX { 0.0 } else { grid[a * k + c] };
                        let vb = if b == usize::MAX { 0.0 } else { grid[b * k + c] };
                        next[i * k + c] = grid[i * k + c] + 0.5 * (va + vb);
                    }
                }
                std::mem::swap(&mut grid, &mut next);
            }
        }
        let mut out = vec![0.0; self.n * k];
        for p in 0..self.n {
            let dst = &mut out[p * k..(p + 1) * k];
            for r in 0..d1 {
                let o = self.offsets[p * d1 + r] * k;
                let w = self.weights[p * d1 + r] * self.norm;
                for (x, g) in dst.iter_mut().zip(&grid[o..o + k]) {
                    *x += w * g;
                }
            }
            let fix = 1.0 - self.self_response[p];
            for (x, v) in dst.iter_mut().zip(&values[p * k..(p + 1) * k]) {
                *x += fix * v;
            }
        }
        Ok(out)
    }
}

/// Infinite-lattice response of the full blur to a unit impulse, keyed by
/// the vertex offset.
fn blur_kernel(d: usize, passes: usize) -> HashMap<Key, f64> {
    let d1 = d + 1;
    let span = 2 * passes + 1;
    // Unnormalized [1/2, 1, 1/2] applied `passes` times.
    let mut taps = vec![1.0f64];
    for _ in 0..passes {
        let mut t = vec![0.0; taps.len() + 2];
        for (i, v) in taps.iter().enumerate() {
            t[i] += 0.5 * v;
            t[i + 1] += v;
            t[i + 2] += 0.5 * v;
        }
        taps = t;
    }
    let mut out = HashMap::new();
    let mut offset = vec![0i64; d];
    let mut tmp = vec![0i64; d];
    let combos = span.pow(d1 as u32);
    for code in 0..combos {
        offset.iter_mut().for_each(|o| *o = 0);
        let mut c = code;
        let mut w = 1.0;
        for j in 0..d1 {
            let idx = c % span;
            c /= span;
            w *= taps[idx];
            let k = idx as i64 - passes as i64;
            for _ in 0..k.unsigned_abs() {
                step(&offset, j, k.signum(), &mut tmp);
                offset.copy_from_slice(&tmp);
            }
        }
        *out.entry(pack(&offset)).or_insert(0.0) += w;
    }
    out
}

/// Lattice response per unit of exact Gaussian mass for one [1/2, 1, 1/2]
/// pass per direction: blur gain `2^{d+1}` times the feature-space volume of
/// one lattice cell, over `(2π)^{d/2}`.
fn lattice_gain(d: usize) -> f64 {
    let df = d as f64;
    let cell = 1.5f64.powf(df / 2.0) / (df + 1.0).sqrt();
    2f64.powi(d as i32 + 1) * cell / (2.0 * std::f64::consts::PI).powf(df / 2.0)
}

/// Exact `O(N²)` Gaussian sums, the reference for [`PermutohedralLattice`].
pub fn brute_force_filter(features: &[f64], d: usize, values: &[f64], k: usize) -> Vec<f64> {
    let n = features.len() / d;
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let fi = &features[i * d..(i + 1) * d];
        for j in 0..n {
            let fj = &features[j * d..(j + 1) * d];
            let d2: f64 = fi.iter().zip(fj).map(|(a, b)| (a - b) * (a - b)).sum();
            let w = (-0.5 * d2).exp();
            for c in 0..k {
                out[i * k + c] += w * values[j * k + c];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(n: usize, d: usize, spread: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * d).map(|_| rng.random_range(0.0..spread)).collect()
    }

    fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn barycentric_weights_are_a_partition_of_unity() {
        for d in 1..=5 {
            let f = random_features(200, d, 5.0, d as u64);
            let lat = PermutohedralLattice::new(&f, d).unwrap();
            for i in 0..lat.len() {
                let w = lat.barycentric(i);
                assert!(w.iter().all(|&x| x >= -1e-12), "{w:?}");
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let one = PermutohedralLattice::new(&[0.3, -1.2], 2).unwrap();
        assert_eq!(one.len(), 1);
        assert!((one.barycentric(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_points_share_keys_and_weights() {
        let lat = PermutohedralLattice::new(&[0.7, 2.1, 0.7, 2.1], 2).unwrap();
        assert_eq!(lat.simplex(0), lat.simplex(1));
        assert_eq!(lat.barycentric(0), lat.barycentric(1));
    }

    #[test]
    fn rejects_non_finite_features() {
        assert!(matches!(
            PermutohedralLattice::new(&[0.0, f64::NAN], 2),
            Err(CrfError::NonFinite)
        ));
    }

    #[test]
    fn matches_brute_force() {
        let cases = (1..=5)
            .flat_map(|d| [0.5, 2.0, 8.0].map(move |s| (1000, d, s * 400f64.powf(1.0 / d as f64) / 4.0, d as u64)));
        for (n, d, spread, seed) in cases.chain([(100, 2, 4.0, 1)]) {
            let f = random_features(n, d, spread, seed);
            let lat = PermutohedralLattice::new(&f, d).unwrap();
            let ones = vec![1.0; n];
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            for vals in [&ones, &v] {
                let approx = lat.filter(vals, 1).unwrap();
                let exact = brute_force_filter(&f, d, vals, 1);
                let e = rel_l2(&approx, &exact);
                assert!(e <= 0.05, "n={n} d={d} spread={spread}: relative L2 {e}");
            }
        }
    }

    #[test]
    fn constant_values_track_point_density() {
        for (d, spread) in [(2, 4.0), (2, 2.0)] {
            let f = random_features(100, d, spread, 11);
            let lat = PermutohedralLattice::new(&f, d).unwrap();
            let ones = vec![1.0; 100];
            let e = rel_l2(&lat.filter(&ones, 1).unwrap(), &brute_force_filter(&f, d, &ones, 1));
            assert!(e <= 0.02, "d={d}: {e}");
        }
    }

    #[test]
    fn separated_points_only_see_themselves() {
        let f = [0.0, 0.0, 40.0, 0.0, 0.0, 40.0];
        let lat = PermutohedralLattice::new(&f, 2).unwrap();
        let out = lat.filter(&[1.0, 2.0, 3.0], 1).unwrap();
        for (i, o) in out.iter().enumerate() {
            assert!((o - (i + 1) as f64).abs() < 1e-12, "{out:?}");
        }
    }

    #[test]
    fn filter_is_linear() {
        let f = random_features(300, 3, 3.0, 4);
        let lat = PermutohedralLattice::new(&f, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v1: Vec<f64> = (0..300 * 2).map(|_| rng.random::<f64>()).collect();
        let v2: Vec<f64> = (0..300 * 2).map(|_| rng.random::<f64>()).collect();
        let mix: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let (f1, f2, fm) = (
            lat.filter(&v1, 2).unwrap(),
            lat.filter(&v2, 2).unwrap(),
            lat.filter(&mix, 2).unwrap(),
        );
        for i in 0..fm.len() {
            assert!((fm[i] - (2.0 * f1[i] - 0.5 * f2[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn filter_is_symmetric() {
        let f = random_features(200, 2, 3.0, 6);
        let lat = PermutohedralLattice::new(&f, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        let v: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let a = dot(&v, &lat.filter(&u, 1).unwrap());
        let b = dot(&u, &lat.filter(&v, 1).unwrap());
        assert!((a - b).abs() <= 1e-9 * a.abs());
        let ea = dot(&v, &brute_force_filter(&f, 2, &u, 1));
        let eb = dot(&u, &brute_force_filter(&f, 2, &v, 1));
        assert!((ea - eb).abs() < 1e-9 * ea.abs());
    }
}
