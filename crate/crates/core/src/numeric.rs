//! Deterministic floating-point reductions.

use crate::par;

const LEAF: usize = 64;
const BLOCK: usize = 4096;

/// Pairwise (cascade) summation; the tree shape depends only on the length.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Sums `term(i)` for `i in 0..n` with a fixed blocking, so the result is
/// bit-identical across thread counts and builds.
pub fn sum_by<F>(n: usize, term: F) -> f64
where
    F: Fn(usize) -> f64 + Send + Sync,
{
    let blocks = n.div_ceil(BLOCK);
    let partial = par::map_range(blocks, |b| {
        let start = b * BLOCK;
        let end = (start + BLOCK).min(n);
        let vals: Vec<f64> = (start..end).map(&term).collect();
        pairwise_sum(&vals)
    });
    pairwise_sum(&partial)
}

/// Population mean and standard deviation in f64.
pub fn mean_std(values: &[f32]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = sum_by(n, |i| values[i] as f64) / n as f64;
    let var = sum_by(n, |i| {
        let d = values[i] as f64 - mean;
        d * d
    }) / n as f64;
    (mean, var.sqrt())
}
