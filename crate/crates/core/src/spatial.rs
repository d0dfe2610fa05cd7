//! Static 3-D kd-tree for nearest-neighbour and radius queries.

use crate::geometry::Vec3;

#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vec3>,
    // Permutation of point indices; each subtree occupies a contiguous range
    // whose median element is the splitting node.
    order: Vec<usize>,
    axes: Vec<u8>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut axes = vec![0u8; points.len()];
        build(points, &mut order, &mut axes, 0);
        Self {
            points: points.to_vec(),
            order,
            axes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, idx: usize) -> &Vec3 {
        &self.points[idx]
    }

    /// Index and squared distance of the closest point; ties resolve to the
    /// lowest index.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_in(0, self.order.len(), q, &mut best);
        Some(best)
    }

    fn nearest_in(&self, lo: usize, hi: usize, q: &Vec3, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        let d2 = (p - q).norm_squared();
        if d2 < best.1 || (d2 == best.1 && idx < best.0) {
            *best = (idx, d2);
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (first, second) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_in(first.0, first.1, q, best);
        if diff * diff <= best.1 {
            self.nearest_in(second.0, second.1, q, best);
        }
    }

    /// All point indices within `radius` of `q`, in ascending index order.
    pub fn within(&self, q: &Vec3, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.within_in(0, self.order.len(), q, radius * radius, &mut out);
        out.sort_unstable();
        out
    }

    fn within_in(&self, lo: usize, hi: usize, q: &Vec3, r2: f64, out: &mut Vec<usize>) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        if (p - q).norm_squared() <= r2 {
            out.push(idx);
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        if diff < 0.0 || diff * diff <= r2 {
            self.within_in(lo, mid, q, r2, out);
        }
        if diff >= 0.0 || diff * diff <= r2 {
            self.within_in(mid + 1, hi, q, r2, out);
        }
    }
}

fn build(points: &[Vec3], order: &mut [usize], axes: &mut [u8], depth: usize) {
    if order.len() <= 1 {
        if let Some(a) = axes.first_mut() {
            *a = (depth % 3) as u8;
        }
        return;
    }
    // Split on the axis of largest extent; this keeps queries fast on the
    // thin, plate-like clouds a depth camera produces.
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for &i in order.iter() {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    let axis = (hi - lo).imax();
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
    });
    axes[mid] = axis as u8;
    let (left, right) = order.split_at_mut(mid);
    let (left_axes, right_axes) = axes.split_at_mut(mid);
    build(points, left, left_axes, depth + 1);
    build(points, &mut right[1..], &mut right_axes[1..], depth + 1);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(rng.random(), rng.random::<f64>() * 2.0, rng.random::<f64>() * 0.1))
            .collect()
    }

    #[test]
    fn nearest_matches_brute_force() {
        let pts = cloud(2000, 1);
        let tree = KdTree::new(&pts);
        for q in cloud(200, 2) {
            let (i, d2) = tree.nearest(&q).unwrap();
            let brute = pts.iter().map(|p| (p - q).norm_squared()).fold(f64::INFINITY, f64::min);
            assert_eq!(d2, brute);
            assert_eq!((pts[i] - q).norm_squared(), brute);
        }
    }

    #[test]
    fn radius_matches_brute_force() {
        let pts = cloud(1500, 3);
        let tree = KdTree::new(&pts);
        for q in cloud(50, 4) {
            let got = tree.within(&q, 0.15);
            let want: Vec<usize> = (0..pts.len()).filter(|&i| (pts[i] - q).norm() <= 0.15).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn empty_tree() {
        let tree = KdTree::new(&[]);
        assert!(tree.nearest(&Vec3::zeros()).is_none());
        assert!(tree.within(&Vec3::zeros(), 1.0).is_empty());
    }
}
