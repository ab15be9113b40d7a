//! Sliding-window planning, weighted stitching and cascade input assembly.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::conv::{conv3d_forward, Conv3dParams};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::par;
use crate::volume::{FeatureMap, Grid, LabelVolume, ProbVolume, Real, ScalarVolume};

/// Ordered window origins covering a volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchPlan {
    pub dims: [usize; 3],
    pub window: [usize; 3],
    pub overlap: f64,
    pub stride: [usize; 3],
    /// Dimensions after padding up to the window size; equal to `dims` unless
    /// the plan was built with padding allowed.
    pub padded_dims: [usize; 3],
    pub origins: Vec<[usize; 3]>,
}

fn axis_origins(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    let last = dim - window;
    let mut v: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o < last).collect();
    v.push(last);
    v
}

/// Plans windows at multiples of `floor(window * (1 - overlap))`, with the
/// final window on each axis clamped to end at the volume edge.
///
/// A window larger than the volume is an error unless `allow_pad` is set, in
/// which case the volume is treated as zero-padded at the far end and patch
/// voxels outside it are dropped during stitching.
pub fn plan_windows(dims: [usize; 3], window: [usize; 3], overlap: f64, allow_pad: bool) -> Result<StitchPlan> {
    if !(0.0..1.0).contains(&overlap) {
        return arg_err(format!("overlap {overlap} outside [0, 1)"));
    }
    if window.contains(&0) || dims.contains(&0) {
        return arg_err("window and volume dimensions must be positive");
    }
    let mut padded = dims;
    for a in 0..3 {
        if window[a] > dims[a] {
            if !allow_pad {
                return shape_err(format!("window {:?} larger than volume {:?}", window, dims));
            }
            padded[a] = window[a];
        }
    }
    let stride = window.map(|w| ((w as f64 * (1.0 - overlap)).floor() as usize).max(1));
    let oz = axis_origins(padded[0], window[0], stride[0]);
    let oy = axis_origins(padded[1], window[1], stride[1]);
    let ox = axis_origins(padded[2], window[2], stride[2]);
    let mut origins = Vec::with_capacity(oz.len() * oy.len() * ox.len());
    for &z in &oz {
        for &y in &oy {
            for &x in &ox {
                origins.push([z, y, x]);
            }
        }
    }
    Ok(StitchPlan { dims, window, overlap, stride, padded_dims: padded, origins })
}

impl StitchPlan {
    /// Number of windows containing each voxel.
    pub fn coverage(&self) -> Vec<u32> {
        let g = Grid::unit(self.dims);
        let mut c = vec![0u32; g.len()];
        for o in &self.origins {
            for z in o[0]..(o[0] + self.window[0]).min(self.dims[0]) {
                for y in o[1]..(o[1] + self.window[1]).min(self.dims[1]) {
                    for x in o[2]..(o[2] + self.window[2]).min(self.dims[2]) {
                        c[g.index(z, y, x)] += 1;
                    }
                }
            }
        }
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    Uniform,
    Gaussian,
}

/// Strictly positive blending weights over one window.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightWindow {
    pub mode: WeightMode,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

pub const GAUSSIAN_FLOOR: f64 = 1e-3;

impl WeightWindow {
    pub fn uniform(dims: [usize; 3]) -> Self {
        Self { mode: WeightMode::Uniform, dims, data: vec![1.0; dims.iter().product()] }
    }

    /// Separable Gaussian with sigma = window / 8 per axis, peak 1, floored.
    pub fn gaussian(dims: [usize; 3]) -> Self {
        let profile = |n: usize| -> Vec<f64> {
            let c = (n as f64 - 1.0) / 2.0;
            let s = n as f64 / 8.0;
            (0..n).map(|i| (-(i as f64 - c).powi(2) / (2.0 * s * s)).exp()).collect()
        };
        let (pz, py, px) = (profile(dims[0]), profile(dims[1]), profile(dims[2]));
        let mut data = Vec::with_capacity(dims.iter().product());
        for wz in &pz {
            for wy in &py {
                for wx in &px {
                    data.push((wz * wy * wx).max(GAUSSIAN_FLOOR));
                }
            }
        }
        Self { mode: WeightMode::Gaussian, dims, data }
    }

    pub fn new(mode: WeightMode, dims: [usize; 3]) -> Self {
        match mode {
            WeightMode::Uniform => Self::uniform(dims),
            WeightMode::Gaussian => Self::gaussian(dims),
        }
    }
}

/// Weighted per-voxel average of overlapping patch probabilities.
///
/// Patches are accumulated in plan order in f64, so the output does not
/// depend on the order they are supplied in.
pub fn stitch<T: Real>(
    patches: &[([usize; 3], ProbVolume<T>)],
    plan: &StitchPlan,
    weights: &WeightWindow,
    grid: Grid,
) -> Result<ProbVolume<T>> {
    if grid.dims != plan.dims {
        return shape_err(format!("output grid {:?} does not match plan {:?}", grid.dims, plan.dims));
    }
    if weights.dims != plan.window {
        return shape_err(format!("weight window {:?} vs plan window {:?}", weights.dims, plan.window));
    }
    let Some(first) = patches.first() else {
        return Err(Error::Coverage("no patches supplied".into()));
    };
    let channels = first.1.channels;
    let rank: HashMap<[usize; 3], usize> = plan.origins.iter().enumerate().map(|(i, o)| (*o, i)).collect();
    let mut ordered: Vec<(usize, &[usize; 3], &ProbVolume<T>)> = Vec::with_capacity(patches.len());
    for (o, p) in patches {
        let Some(&r) = rank.get(o) else {
            return arg_err(format!("patch origin {o:?} is not in the plan"));
        };
        if p.grid.dims != plan.window || p.channels != channels {
            return shape_err(format!(
                "patch at {o:?} has shape {}x{:?}, expected {channels}x{:?}",
                p.channels, p.grid.dims, plan.window
            ));
        }
        ordered.push((r, o, p));
    }
    ordered.sort_by_key(|e| e.0);

    let [d, h, w] = grid.dims;
    let [wd, wh, ww] = plan.window;
    let plane = h * w;
    // Each z-slice is reduced independently: values laid out [c][y*w + x].
    let slices: Vec<Result<Vec<T>>> = par::map_range(d, |z| {
        let mut acc = vec![0.0f64; channels * plane];
        let mut wsum = vec![0.0f64; plane];
        for (_, o, p) in &ordered {
            if z < o[0] || z >= o[0] + wd {
                continue;
            }
            let lz = z - o[0];
            let pn = p.voxels();
            for ly in 0..wh {
                let y = o[1] + ly;
                if y >= h {
                    break;
                }
                for lx in 0..ww {
                    let x = o[2] + lx;
                    if x >= w {
                        break;
                    }
                    let li = (lz * wh + ly) * ww + lx;
                    let wt = weights.data[li];
                    let v = y * w + x;
                    wsum[v] += wt;
                    for c in 0..channels {
                        acc[c * plane + v] += wt * p.data[c * pn + li].as_f64();
                    }
                }
            }
        }
        if let Some(v) = wsum.iter().position(|&s| s == 0.0) {
            return Err(Error::Coverage(format!("voxel (z={z}, y={}, x={}) is not covered", v / w, v % w)));
        }
        Ok(acc.iter().enumerate().map(|(i, a)| T::of(a / wsum[i % plane])).collect())
    });
    let n = grid.len();
    let mut data = vec![T::zero(); channels * n];
    for (z, s) in slices.into_iter().enumerate() {
        let s = s?;
        for c in 0..channels {
            data[c * n + z * plane..c * n + (z + 1) * plane].copy_from_slice(&s[c * plane..(c + 1) * plane]);
        }
    }
    ProbVolume::new(grid, channels, data)
}

/// Extracts the window at `origin`, zero-filling outside the volume.
pub fn window_of<T: Real>(prob: &ProbVolume<T>, origin: [usize; 3], window: [usize; 3]) -> ProbVolume<T> {
    let g = prob.grid;
    let wg = Grid { dims: window, ..g };
    let n = g.len();
    let wn = wg.len();
    let mut data = vec![T::zero(); prob.channels * wn];
    for c in 0..prob.channels {
        for lz in 0..window[0] {
            for ly in 0..window[1] {
                for lx in 0..window[2] {
                    let (z, y, x) = (origin[0] + lz, origin[1] + ly, origin[2] + lx);
                    if z < g.dims[0] && y < g.dims[1] && x < g.dims[2] {
                        data[c * wn + wg.index(lz, ly, lx)] = prob.data[c * n + g.index(z, y, x)];
                    }
                }
            }
        }
    }
    ProbVolume { grid: wg, channels: prob.channels, data }
}

/// Per-voxel index of the largest channel; ties go to the lowest index.
pub fn argmax_labels<T: Real>(probs: &ProbVolume<T>) -> Result<LabelVolume> {
    let n = probs.voxels();
    let data = par::map_range(n, |v| {
        let mut best = 0usize;
        let mut bv = probs.data[v];
        for c in 1..probs.channels {
            let x = probs.data[c * n + v];
            if x > bv {
                best = c;
                bv = x;
            }
        }
        best as u16
    });
    LabelVolume::new(probs.grid, data, probs.channels as u16)
}

/// Stage-two input: `[image, adapter(concat(p_up, p_low))]`.
pub fn compose_stage2_input(
    image: &ScalarVolume,
    p_up: &ProbVolume,
    p_low: &ProbVolume,
    adapter: &Conv3dParams,
) -> Result<FeatureMap> {
    image.grid.require_dims(&p_up.grid, "upper probabilities")?;
    image.grid.require_dims(&p_low.grid, "lower probabilities")?;
    adapter.validate()?;
    if adapter.c_in != p_up.channels + p_low.channels {
        return shape_err(format!(
            "adapter takes {} channels, probabilities provide {}",
            adapter.c_in,
            p_up.channels + p_low.channels
        ));
    }
    let dims = image.grid.dims;
    let mut cat = p_up.data.clone();
    cat.extend_from_slice(&p_low.data);
    let aligned = conv3d_forward(&FeatureMap::new(adapter.c_in, dims, cat)?, adapter)?;
    let mut data = image.data.clone();
    data.extend_from_slice(&aligned.data);
    FeatureMap::new(1 + adapter.c_out, dims, data)
}
