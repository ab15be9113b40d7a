//! Distance-guided anatomical channel attention.
//!
//! A signed distance prior is instance-normalised, lifted into `C_ad`
//! channels by a pointwise conv + batch norm + ReLU adapter, collapsed into a
//! min-max normalised spatial map, and used as the measure of a weighted
//! global pooling. The pooled descriptor drives a two-layer channel gate.

use serde::{Deserialize, Serialize};

use crate::conv::Conv3dParams;
use crate::error::{arg_err, shape_err, Result};
use crate::numeric::{mean_std, sum_by};
use crate::par;
use crate::volume::{FeatureMap, Real, ScalarVolume, Volume};

/// Floor on the instance standard deviation.
pub const SIGMA_MIN: f64 = 1e-5;
/// Default stability term of the weighted pooling.
pub const AWP_EPS: f64 = 1e-5;
/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Spatial weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttentionMap<T = f32> {
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Real> SpatialAttentionMap<T> {
    pub fn new(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return shape_err(format!("attention map has {} values for dims {dims:?}", data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn uniform(dims: [usize; 3], value: T) -> Self {
        Self { dims, data: vec![value; dims.iter().product()] }
    }
}

/// Instance-norm affine and the pointwise adapter `ReLU(BN(Conv1x1(.)))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub gamma: f64,
    pub beta: f64,
    pub conv: Conv3dParams,
    pub bn_mean: Vec<f32>,
    pub bn_var: Vec<f32>,
    pub bn_gamma: Vec<f32>,
    pub bn_beta: Vec<f32>,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
}

fn default_bn_eps() -> f64 {
    BN_EPS
}

impl AdapterParams {
    /// Unit affine, identity batch norm, given conv.
    pub fn with_conv(conv: Conv3dParams) -> Self {
        let c = conv.c_out;
        Self {
            gamma: 1.0,
            beta: 0.0,
            conv,
            bn_mean: vec![0.0; c],
            bn_var: vec![1.0; c],
            bn_gamma: vec![1.0; c],
            bn_beta: vec![0.0; c],
            bn_eps: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.conv.c_out
    }

    pub fn validate(&self) -> Result<()> {
        self.conv.validate()?;
        if self.conv.c_in != 1 || self.conv.kernel != 1 {
            return shape_err("adapter conv must be 1 input channel with a 1x1x1 kernel");
        }
        let c = self.conv.c_out;
        for (name, v) in [("bn_mean", &self.bn_mean), ("bn_var", &self.bn_var), ("bn_gamma", &self.bn_gamma), ("bn_beta", &self.bn_beta)] {
            if v.len() != c {
                return shape_err(format!("{name} has {} entries, expected {c}", v.len()));
            }
        }
        if self.bn_var.iter().any(|&v| !(v >= 0.0)) {
            return arg_err("bn_var must be non-negative");
        }
        if !(self.gamma.is_finite() && self.beta.is_finite()) {
            return arg_err("gamma/beta must be finite");
        }
        Ok(())
    }
}

/// Two dense layers `C -> C_hidden -> C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelAttentionParams {
    pub channels: usize,
    pub hidden: usize,
    /// Row-major `hidden x channels`.
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    /// Row-major `channels x hidden`.
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
}

impl ChannelAttentionParams {
    pub fn zeros(channels: usize, hidden: usize) -> Self {
        Self {
            channels,
            hidden,
            w1: vec![0.0; hidden * channels],
            b1: vec![0.0; hidden],
            w2: vec![0.0; channels * hidden],
            b2: vec![0.0; channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h) = (self.channels, self.hidden);
        if self.w1.len() != h * c || self.b1.len() != h || self.w2.len() != c * h || self.b2.len() != c {
            return shape_err(format!("channel attention shapes inconsistent for C={c}, hidden={h}"));
        }
        Ok(())
    }
}

/// `(S - mean) / max(std, SIGMA_MIN) * gamma + beta` with population std.
pub fn instance_norm_affine(s: &ScalarVolume, gamma: f64, beta: f64) -> ScalarVolume {
    let (mean, std) = mean_std(&s.data);
    let sigma = std.max(SIGMA_MIN);
    let data = par::map_slice(&s.data, |&v| ((v as f64 - mean) / sigma * gamma + beta) as f32);
    Volume { grid: s.grid, data }
}

/// Pointwise adapter in inference mode (stored batch-norm statistics).
pub fn geometric_adapter(s_tilde: &ScalarVolume, p: &AdapterParams) -> Result<FeatureMap> {
    p.validate()?;
    let n = s_tilde.data.len();
    let c_ad = p.channels();
    let coef: Vec<(f64, f64)> = (0..c_ad)
        .map(|c| {
            let scale = p.bn_gamma[c] as f64 / (p.bn_var[c] as f64 + p.bn_eps).sqrt();
            (scale, p.bn_beta[c] as f64 - p.bn_mean[c] as f64 * scale)
        })
        .collect();
    let mut out = vec![0.0f32; c_ad * n];
    par::for_each_chunk_mut(&mut out, n, |c, dst| {
        let (w, b) = (p.conv.weights[c] as f64, p.conv.bias[c] as f64);
        let (scale, shift) = coef[c];
        for (o, &s) in dst.iter_mut().zip(&s_tilde.data) {
            let y = (w * s as f64 + b) * scale + shift;
            *o = y.max(0.0) as f32;
        }
    });
    FeatureMap::new(c_ad, s_tilde.grid.dims, out)
}

/// Channel mean of `|F_geo|`, min-max normalised. A constant field maps to zeros.
pub fn spatial_attention<T: Real>(f_geo: &FeatureMap<T>) -> SpatialAttentionMap<T> {
    let n = f_geo.voxels();
    let c = f_geo.channels;
    let agg: Vec<f64> = par::map_range(n, |v| (0..c).map(|k| f_geo.data[k * n + v].as_f64().abs()).sum::<f64>() / c as f64);
    let (lo, hi) = agg.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| (lo.min(a), hi.max(a)));
    let data = if hi > lo {
        let range = hi - lo;
        agg.iter().map(|&a| T::of((a - lo) / range)).collect()
    } else {
        vec![T::zero(); n]
    };
    SpatialAttentionMap { dims: f_geo.dims, data }
}

fn check_awp<T: Real>(x: &FeatureMap<T>, m: &SpatialAttentionMap<T>, eps: f64) -> Result<()> {
    if x.dims != m.dims {
        return shape_err(format!("features {:?} vs attention {:?}", x.dims, m.dims));
    }
    if !(eps > 0.0) {
        return arg_err(format!("eps must be positive, got {eps}"));
    }
    Ok(())
}

/// `z_c = Σ X_c m / (Σ m + eps)`.
pub fn anatomical_weighted_pooling<T: Real>(x: &FeatureMap<T>, m: &SpatialAttentionMap<T>, eps: f64) -> Result<Vec<f64>> {
    check_awp(x, m, eps)?;
    let n = x.voxels();
    let denom = sum_by(n, |v| m.data[v].as_f64()) + eps;
    Ok((0..x.channels)
        .map(|c| {
            let xc = x.channel(c);
            sum_by(n, |v| xc[v].as_f64() * m.data[v].as_f64()) / denom
        })
        .collect())
}

/// Plain per-channel mean.
pub fn global_average_pooling<T: Real>(x: &FeatureMap<T>) -> Vec<f64> {
    let n = x.voxels();
    (0..x.channels)
        .map(|c| {
            let xc = x.channel(c);
            sum_by(n, |v| xc[v].as_f64()) / n as f64
        })
        .collect()
}

/// Gradients of `Σ_c upstream_c z_c` with respect to the features and the map.
pub fn awp_grad<T: Real>(
    x: &FeatureMap<T>,
    m: &SpatialAttentionMap<T>,
    eps: f64,
    upstream: &[f64],
) -> Result<(FeatureMap<T>, SpatialAttentionMap<T>)> {
    check_awp(x, m, eps)?;
    if upstream.len() != x.channels {
        return shape_err(format!("upstream has {} entries for {} channels", upstream.len(), x.channels));
    }
    let n = x.voxels();
    let denom = sum_by(n, |v| m.data[v].as_f64()) + eps;
    let weighted: Vec<f64> = (0..x.channels)
        .map(|c| {
            let xc = x.channel(c);
            sum_by(n, |v| xc[v].as_f64() * m.data[v].as_f64())
        })
        .collect();
    let gx = par::map_range(x.data.len(), |i| T::of(upstream[i / n] * m.data[i % n].as_f64() / denom));
    let d2 = denom * denom;
    let gm = par::map_range(n, |v| {
        let s: f64 = (0..x.channels)
            .map(|c| upstream[c] * (x.data[c * n + v].as_f64() * denom - weighted[c]))
            .sum();
        T::of(s / d2)
    });
    Ok((FeatureMap::new(x.channels, x.dims, gx)?, SpatialAttentionMap { dims: m.dims, data: gm }))
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `sigmoid(W2 ReLU(W1 z + b1) + b2)`.
pub fn channel_weights(z: &[f64], p: &ChannelAttentionParams) -> Result<Vec<f64>> {
    p.validate()?;
    if z.len() != p.channels {
        return shape_err(format!("descriptor has {} entries, expected {}", z.len(), p.channels));
    }
    let hidden: Vec<f64> = (0..p.hidden)
        .map(|j| {
            let a: f64 = (0..p.channels).map(|c| p.w1[j * p.channels + c] as f64 * z[c]).sum::<f64>() + p.b1[j] as f64;
            a.max(0.0)
        })
        .collect();
    Ok((0..p.channels)
        .map(|c| {
            let a: f64 = (0..p.hidden).map(|j| p.w2[c * p.hidden + j] as f64 * hidden[j]).sum::<f64>() + p.b2[c] as f64;
            sigmoid(a)
        })
        .collect())
}

/// Scales each channel of `x` by its gate computed from `z`.
pub fn channel_recalibrate<T: Real>(x: &FeatureMap<T>, z: &[f64], p: &ChannelAttentionParams) -> Result<FeatureMap<T>> {
    if x.channels != p.channels {
        return shape_err(format!("features have {} channels, attention expects {}", x.channels, p.channels));
    }
    let s = channel_weights(z, p)?;
    let n = x.voxels();
    let data = par::map_range(x.data.len(), |i| T::of(x.data[i].as_f64() * s[i / n]));
    FeatureMap::new(x.channels, x.dims, data)
}

/// Every intermediate of one attention pass.
#[derive(Clone, Debug)]
pub struct SdmaaTrace {
    pub normalized_prior: ScalarVolume,
    pub geo_features: FeatureMap,
    pub attention: SpatialAttentionMap,
    pub descriptor: Vec<f64>,
    pub output: FeatureMap,
}

/// Full pass with intermediates. `shape_prior` must already be at the
/// feature resolution (see [`crate::preprocess::resample_trilinear`]).
pub fn sdmaa_forward_traced(
    x: &FeatureMap,
    shape_prior: &ScalarVolume,
    ap: &AdapterParams,
    cp: &ChannelAttentionParams,
    eps: f64,
) -> Result<SdmaaTrace> {
    if shape_prior.grid.dims != x.dims {
        return shape_err(format!("prior {:?} vs features {:?}; resample the prior first", shape_prior.grid.dims, x.dims));
    }
    let normalized_prior = instance_norm_affine(shape_prior, ap.gamma, ap.beta);
    let geo_features = geometric_adapter(&normalized_prior, ap)?;
    let attention = spatial_attention(&geo_features);
    let descriptor = anatomical_weighted_pooling(x, &attention, eps)?;
    let output = channel_recalibrate(x, &descriptor, cp)?;
    Ok(SdmaaTrace { normalized_prior, geo_features, attention, descriptor, output })
}

pub fn sdmaa_forward(
    x: &FeatureMap,
    shape_prior: &ScalarVolume,
    ap: &AdapterParams,
    cp: &ChannelAttentionParams,
    eps: f64,
) -> Result<FeatureMap> {
    Ok(sdmaa_forward_traced(x, shape_prior, ap, cp, eps)?.output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    fn vol(vals: &[f32]) -> ScalarVolume {
        Volume { grid: Grid::unit([1, 1, vals.len()]), data: vals.to_vec() }
    }

    #[test]
    fn instance_norm_cases() {
        assert_eq!(instance_norm_affine(&vol(&[-1.0, 1.0]), 2.0, 1.0).data, vec![-1.0, 3.0]);
        assert_eq!(instance_norm_affine(&vol(&[4.0; 5]), 3.0, 0.25).data, vec![0.25; 5]);
        let out = instance_norm_affine(&vol(&[1.0, 5.0, 2.0, 9.0]), 1.0, 0.0);
        let (m, s) = mean_std(&out.data);
        assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn adapter_basic_cases() {
        let s = vol(&[0.0, 1.5, 3.0]);
        let zero = AdapterParams::with_conv(Conv3dParams::zeros(2, 1, 1));
        assert!(geometric_adapter(&s, &zero).unwrap().data.iter().all(|&v| v == 0.0));
        let id = AdapterParams::with_conv(Conv3dParams::new(1, 1, 1, vec![1.0], vec![0.0]).unwrap());
        assert_eq!(geometric_adapter(&s, &id).unwrap().data, s.data);
        let mut bad = id.clone();
        bad.bn_var[0] = -1.0;
        assert!(geometric_adapter(&s, &bad).is_err());
    }

    #[test]
    fn attention_endpoints_and_degenerate() {
        let f = FeatureMap::new(1, [1, 1, 4], vec![0.0f32, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(spatial_attention(&f).data, vec![0.0, 1.0, 0.0, 1.0]);
        let c = FeatureMap::new(2, [1, 1, 3], vec![1.0f32; 6]).unwrap();
        assert_eq!(spatial_attention(&c).data, vec![0.0; 3]);
    }

    #[test]
    fn pooling_cases() {
        let x = FeatureMap::new(2, [1, 1, 4], vec![1.0f64, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 8.0]).unwrap();
        let eps = 1e-5;
        let uni = SpatialAttentionMap::uniform([1, 1, 4], 1.0);
        let z = anatomical_weighted_pooling(&x, &uni, eps).unwrap();
        let gap = global_average_pooling(&x);
        for c in 0..2 {
            assert!((z[c] - gap[c] * 4.0 / (4.0 + eps)).abs() < 1e-12);
        }
        let one_hot = SpatialAttentionMap::new([1, 1, 4], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let z = anatomical_weighted_pooling(&x, &one_hot, eps).unwrap();
        assert_eq!(z, vec![3.0 / (1.0 + eps), 1.0 / (1.0 + eps)]);
        let zero = SpatialAttentionMap::uniform([1, 1, 4], 0.0);
        assert_eq!(anatomical_weighted_pooling(&x, &zero, eps).unwrap(), vec![0.0, 0.0]);
        let (gx, _) = awp_grad(&x, &one_hot, eps, &[1.0, 1.0]).unwrap();
        assert!(gx.data.iter().enumerate().all(|(i, &g)| (i % 4 == 2) == (g != 0.0)));
        let (gx, gm) = awp_grad(&x, &one_hot, eps, &[0.0, 0.0]).unwrap();
        assert!(gx.data.iter().chain(&gm.data).all(|&g| g == 0.0));
        assert!(anatomical_weighted_pooling(&x, &SpatialAttentionMap::uniform([1, 2, 2], 1.0), eps).is_err());
    }

    #[test]
    fn recalibration_cases() {
        let x = FeatureMap::new(2, [1, 1, 2], vec![2.0f32, 4.0, 6.0, 8.0]).unwrap();
        let p = ChannelAttentionParams::zeros(2, 1);
        let y = channel_recalibrate(&x, &[3.0, -1.0], &p).unwrap();
        assert_eq!(y.data, vec![1.0, 2.0, 3.0, 4.0]);
        let mut sat = ChannelAttentionParams::zeros(2, 1);
        sat.b2 = vec![20.0, 0.0];
        let s = channel_weights(&[0.0, 0.0], &sat).unwrap();
        assert!((1.0 - s[0]) < 1e-6 && s[1] == 0.5);
        assert!(channel_recalibrate(&x, &[1.0], &p).is_err());
    }
}
