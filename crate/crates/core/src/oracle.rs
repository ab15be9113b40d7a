//! Slow reference implementations used to cross-check the fast kernels.
//!
//! Everything here is written as the most direct loop over the definition,
//! sharing no code with the optimised paths beyond the data types.

use std::collections::HashSet;

use crate::conv::Conv3dParams;
use crate::volume::{FeatureMap, LabelVolume, ProbVolume, Real};

/// For every point of `a`, the exact distance to the closest point of `b`.
pub fn nn_distances(a: &[[f64; 3]], b: &[[f64; 3]]) -> Vec<f64> {
    a.iter()
        .map(|p| {
            b.iter()
                .map(|q| {
                    let dx = p[0] - q[0];
                    let dy = p[1] - q[1];
                    let dz = p[2] - q[2];
                    dx * dx + dy * dy + dz * dz
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

fn percentile95(mut d: Vec<f64>) -> f64 {
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let n = d.len();
    d[(95 * n).div_ceil(100) - 1]
}

/// All-pairs symmetric HD95 with the nearest-rank percentile.
pub fn hd95(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    percentile95(nn_distances(a, b)).max(percentile95(nn_distances(b, a)))
}

/// All-pairs average symmetric surface distance.
pub fn assd(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let ab = nn_distances(a, b);
    let ba = nn_distances(b, a);
    let mut total = 0.0;
    for d in ab.iter().chain(&ba) {
        total += d;
    }
    total / (ab.len() + ba.len()) as f64
}

/// DSC and sensitivity from voxel index sets.
pub fn dsc_sen(pred: &LabelVolume, gt: &LabelVolume, class: u16) -> (f64, Option<f64>) {
    let p: HashSet<usize> = (0..pred.data.len()).filter(|&i| pred.data[i] == class).collect();
    let g: HashSet<usize> = (0..gt.data.len()).filter(|&i| gt.data[i] == class).collect();
    let inter = p.intersection(&g).count() as f64;
    let dsc = if p.is_empty() && g.is_empty() { 1.0 } else { 2.0 * inter / (p.len() + g.len()) as f64 };
    let sen = if g.is_empty() { None } else { Some(inter / g.len() as f64) };
    (dsc, sen)
}

/// Seven nested loops over the convolution definition, in f64.
pub fn conv3d<T: Real>(x: &FeatureMap<T>, p: &Conv3dParams) -> Vec<f64> {
    let [d, h, w] = x.dims;
    let k = p.kernel as isize;
    let pad = p.padding as isize;
    let mut out = vec![0.0; p.c_out * d * h * w];
    for o in 0..p.c_out {
        for z in 0..d as isize {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = p.bias[o] as f64;
                    for i in 0..p.c_in {
                        for dz in 0..k {
                            for dy in 0..k {
                                for dx in 0..k {
                                    let (sz, sy, sx) = (z + dz - pad, y + dy - pad, xx + dx - pad);
                                    if sz < 0 || sy < 0 || sx < 0 || sz >= d as isize || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let wi = (((o * p.c_in + i) as isize * k + dz) * k + dy) * k + dx;
                                    let xi = ((i as isize * d as isize + sz) * h as isize + sy) * w as isize + sx;
                                    acc += p.weights[wi as usize] as f64 * x.data[xi as usize].as_f64();
                                }
                            }
                        }
                    }
                    out[((o * d + z as usize) * h + y as usize) * w + xx as usize] = acc;
                }
            }
        }
    }
    out
}

/// First index of the maximum channel at each voxel.
pub fn argmax<T: Real>(p: &ProbVolume<T>) -> Vec<u16> {
    let n = p.voxels();
    (0..n)
        .map(|v| {
            let mut best = 0;
            for c in 0..p.channels {
                if p.data[c * n + v].as_f64() > p.data[best * n + v].as_f64() {
                    best = c;
                }
            }
            best as u16
        })
        .collect()
}

/// Cross-entropy with clamp `1e-7` over all voxels.
pub fn cross_entropy<T: Real>(p: &ProbVolume<T>, gt: &LabelVolume) -> f64 {
    let n = p.voxels();
    let mut s = 0.0;
    for v in 0..n {
        s -= p.data[gt.data[v] as usize * n + v].as_f64().max(1e-7).ln();
    }
    s / n as f64
}

/// Soft Dice loss averaged over every channel.
pub fn soft_dice<T: Real>(p: &ProbVolume<T>, gt: &LabelVolume, eps: f64) -> f64 {
    let n = p.voxels();
    let mut mean = 0.0;
    for c in 0..p.channels {
        let (mut ps, mut gs, mut inter) = (0.0, 0.0, 0.0);
        for v in 0..n {
            let pv = p.data[c * n + v].as_f64();
            let g = if gt.data[v] as usize == c { 1.0 } else { 0.0 };
            ps += pv;
            gs += g;
            inter += pv * g;
        }
        mean += 2.0 * inter / (ps + gs + eps);
    }
    1.0 - mean / p.channels as f64
}
