//! Static 3D k-d tree for exact nearest-neighbour queries.
//!
//! The tree is an implicit balanced layout over a permutation of the input
//! points: the median of every index range is the splitting node. Queries
//! return the exact minimum squared distance; ties may resolve to any of the
//! equidistant points.

const LEAF_SIZE: usize = 8;

/// Squared Euclidean distance, summed x, then y, then z.
#[inline]
pub fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    perm: Vec<usize>,
    axis: Vec<u8>,
}

impl KdTree {
    pub fn build(points: Vec<[f64; 3]>) -> Self {
        let n = points.len();
        let mut tree = Self { perm: (0..n).collect(), axis: vec![0; n], points };
        tree.build_range(0, n);
        tree
    }

    fn build_range(&mut self, lo: usize, hi: usize) {
        if hi - lo <= LEAF_SIZE {
            return;
        }
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for &i in &self.perm[lo..hi] {
            for a in 0..3 {
                min[a] = min[a].min(self.points[i][a]);
                max[a] = max[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3).max_by(|&a, &b| (max[a] - min[a]).total_cmp(&(max[b] - min[b]))).unwrap();
        let mid = (lo + hi) / 2;
        let pts = &self.points;
        self.perm[lo..hi].select_nth_unstable_by(mid - lo, |&i, &j| pts[i][axis].total_cmp(&pts[j][axis]));
        self.axis[mid] = axis as u8;
        self.build_range(lo, mid);
        self.build_range(mid + 1, hi);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    /// Index and squared distance of the nearest point, `None` when empty.
    pub fn nearest(&self, q: &[f64; 3]) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(q, 0, self.points.len(), &mut best);
        Some(best)
    }

    /// Distance (not squared) to the nearest point.
    pub fn nearest_distance(&self, q: &[f64; 3]) -> Option<f64> {
        self.nearest(q).map(|(_, d2)| d2.sqrt())
    }

    fn search(&self, q: &[f64; 3], lo: usize, hi: usize, best: &mut (usize, f64)) {
        if hi - lo <= LEAF_SIZE {
            for &i in &self.perm[lo..hi] {
                let d = sq_dist(q, &self.points[i]);
                if d < best.1 {
                    *best = (i, d);
                }
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let i = self.perm[mid];
        let d = sq_dist(q, &self.points[i]);
        if d < best.1 {
            *best = (i, d);
        }
        let axis = self.axis[mid] as usize;
        let diff = q[axis] - self.points[i][axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(q, near.0, near.1, best);
        if diff * diff < best.1 {
            self.search(q, far.0, far.1, best);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [1usize, 5, 9, 100, 777] {
            let pts: Vec<[f64; 3]> = (0..n).map(|_| [0; 3].map(|_| rng.random_range(-10.0..10.0))).collect();
            let tree = KdTree::build(pts.clone());
            for _ in 0..50 {
                let q = [0; 3].map(|_| rng.random_range(-12.0..12.0));
                let brute = pts.iter().map(|p| sq_dist(&q, p)).fold(f64::INFINITY, f64::min);
                assert_eq!(tree.nearest(&q).unwrap().1, brute);
            }
        }
    }

    #[test]
    fn duplicates_and_empty() {
        let tree = KdTree::build(vec![[1.0, 1.0, 1.0]; 20]);
        assert_eq!(tree.nearest(&[1.0, 1.0, 2.0]).unwrap().1, 1.0);
        assert!(KdTree::build(Vec::new()).nearest(&[0.0; 3]).is_none());
    }
}
