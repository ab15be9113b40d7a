//! Ambiguity-gated boundary refinement.
//!
//! Stage-one upper/lower arch probabilities are averaged into a foreground
//! probability `p`, turned into the normalised Gini impurity `A = 4 p (1 - p)`,
//! and thresholded into a voxel mask. The mask gates a residual correction
//! produced by a small bottleneck network:
//! `F_out = F_in + alpha * (M ⊙ R(F_in))`.

use serde::{Deserialize, Serialize};

use crate::conv::{conv3d_forward, relu, Conv3dParams};
use crate::error::{arg_err, shape_err, Result};
use crate::numeric::sum_by;
use crate::par;
use crate::preprocess::resample_nearest;
use crate::volume::{FeatureMap, Grid, ProbVolume, Real, Volume};

/// Default gate threshold.
pub const DEFAULT_TAU: f64 = 0.95;

/// Per-voxel ambiguity in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AmbiguityField {
    pub grid: Grid,
    pub data: Vec<f32>,
}

impl AmbiguityField {
    /// Nearest-neighbour resampling to a feature resolution.
    pub fn resample_nearest(&self, dims: [usize; 3]) -> Result<AmbiguityField> {
        let v = resample_nearest(&Volume { grid: self.grid, data: self.data.clone() }, dims)?;
        Ok(AmbiguityField { grid: v.grid, data: v.data })
    }
}

/// Binary gate `A > tau`, remembering the threshold that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingMask {
    pub grid: Grid,
    pub data: Vec<bool>,
    pub tau: f64,
}

impl GatingMask {
    pub fn active(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn is_subset_of(&self, other: &GatingMask) -> bool {
        self.data.len() == other.data.len() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn resample_nearest(&self, dims: [usize; 3]) -> Result<GatingMask> {
        let v = resample_nearest(&Volume { grid: self.grid, data: self.data.clone() }, dims)?;
        Ok(GatingMask { grid: v.grid, data: v.data, tau: self.tau })
    }
}

/// `(p_upper + p_lower) / 2`.
pub fn foreground_prob<T: Real>(p_up: &ProbVolume<T>, p_low: &ProbVolume<T>) -> Result<ProbVolume<T>> {
    if p_up.channels != 1 || p_low.channels != 1 {
        return shape_err("foreground probability needs single-channel inputs");
    }
    if p_up.grid.dims != p_low.grid.dims || p_up.grid.spacing != p_low.grid.spacing {
        return shape_err(format!(
            "upper {:?}/{:?} vs lower {:?}/{:?}",
            p_up.grid.dims, p_up.grid.spacing, p_low.grid.dims, p_low.grid.spacing
        ));
    }
    let two = T::one() + T::one();
    let data = par::map_range(p_up.data.len(), |i| (p_up.data[i] + p_low.data[i]) / two);
    ProbVolume::new(p_up.grid, 1, data)
}

#[inline]
pub fn ambiguity(p: f64) -> f64 {
    4.0 * p * (1.0 - p)
}

/// Normalised Gini impurity of a foreground probability.
pub fn ambiguity_field<T: Real>(p_fg: &ProbVolume<T>) -> Result<AmbiguityField> {
    if p_fg.channels != 1 {
        return shape_err("ambiguity field needs a single-channel probability");
    }
    if let Some(i) = p_fg.data.iter().position(|v| !(*v >= T::zero() && *v <= T::one())) {
        return arg_err(format!("probability {:?} at voxel {i} outside [0,1]", p_fg.data[i]));
    }
    let data = par::map_slice(&p_fg.data, |&p| ambiguity(p.as_f64()) as f32);
    Ok(AmbiguityField { grid: p_fg.grid, data })
}

/// Strict threshold `A > tau` for `tau` in `(0, 1]`. `tau = 0` selects every
/// voxel (global refinement), including fully confident ones.
pub fn gating_mask(a: &AmbiguityField, tau: f64) -> Result<GatingMask> {
    if !(0.0..=1.0).contains(&tau) {
        return arg_err(format!("tau {tau} outside [0, 1]"));
    }
    let data = par::map_slice(&a.data, |&v| tau == 0.0 || v as f64 > tau);
    Ok(GatingMask { grid: a.grid, data, tau })
}

/// Probability interval `(lo, hi)` whose ambiguity exceeds `tau`.
pub fn active_band(tau: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&tau) {
        return arg_err(format!("tau {tau} outside [0, 1]"));
    }
    let r = (1.0 - tau).sqrt() / 2.0;
    Ok((0.5 - r, 0.5 + r))
}

/// Bottleneck refiner: 3x3x3 down-projection, 3x3x3 context, 1x1x1 restore.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinerParams {
    pub conv1: Conv3dParams,
    pub conv2: Conv3dParams,
    pub conv3: Conv3dParams,
    pub alpha: f64,
}

impl RefinerParams {
    pub fn new(conv1: Conv3dParams, conv2: Conv3dParams, conv3: Conv3dParams, alpha: f64) -> Result<Self> {
        let p = Self { conv1, conv2, conv3, alpha };
        p.validate()?;
        Ok(p)
    }

    /// All-zero layers with the given widths and `alpha = 0`.
    pub fn zeros(channels: usize, mid: usize) -> Self {
        Self {
            conv1: Conv3dParams::zeros(mid, channels, 3),
            conv2: Conv3dParams::zeros(mid, mid, 3),
            conv3: Conv3dParams::zeros(channels, mid, 1),
            alpha: 0.0,
        }
    }

    /// Default bottleneck width: half the input channels, at least one.
    pub fn default_mid(channels: usize) -> usize {
        (channels / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        for c in [&self.conv1, &self.conv2, &self.conv3] {
            c.validate()?;
        }
        if self.conv1.c_out != self.conv2.c_in || self.conv2.c_out != self.conv3.c_in {
            return shape_err("refiner channel chain is inconsistent");
        }
        if self.conv3.c_out != self.conv1.c_in {
            return shape_err("refiner must restore the input channel count");
        }
        if !self.alpha.is_finite() {
            return arg_err("alpha must be finite");
        }
        Ok(())
    }
}

/// `Conv1x1(ReLU(Conv3(ReLU(Conv3(F_in)))))`.
pub fn refiner_forward<T: Real>(f_in: &FeatureMap<T>, p: &RefinerParams) -> Result<FeatureMap<T>> {
    p.validate()?;
    let h = relu(conv3d_forward(f_in, &p.conv1)?);
    let h = relu(conv3d_forward(&h, &p.conv2)?);
    conv3d_forward(&h, &p.conv3)
}

fn check_fusion<T: Real>(f_in: &FeatureMap<T>, f_ref: &FeatureMap<T>, m: &GatingMask) -> Result<()> {
    if !f_in.same_shape(f_ref) {
        return shape_err(format!(
            "F_in {}x{:?} vs F_ref {}x{:?}",
            f_in.channels, f_in.dims, f_ref.channels, f_ref.dims
        ));
    }
    if m.grid.dims != f_in.dims {
        return shape_err(format!("mask {:?} vs features {:?}", m.grid.dims, f_in.dims));
    }
    Ok(())
}

/// `F_in + alpha * (M ⊙ F_ref)`; ungated voxels are copied unchanged.
pub fn gated_fusion<T: Real>(f_in: &FeatureMap<T>, f_ref: &FeatureMap<T>, m: &GatingMask, alpha: f64) -> Result<FeatureMap<T>> {
    check_fusion(f_in, f_ref, m)?;
    let n = f_in.voxels();
    let a = T::of(alpha);
    let data = par::map_range(f_in.data.len(), |i| {
        if m.data[i % n] {
            f_in.data[i] + a * f_ref.data[i]
        } else {
            f_in.data[i]
        }
    });
    FeatureMap::new(f_in.channels, f_in.dims, data)
}

/// Gradients of a scalar objective through [`gated_fusion`].
#[derive(Clone, Debug, PartialEq)]
pub struct FusionGrad<T> {
    pub f_in: FeatureMap<T>,
    pub f_ref: FeatureMap<T>,
    pub alpha: f64,
}

pub fn gated_fusion_grad<T: Real>(
    f_in: &FeatureMap<T>,
    f_ref: &FeatureMap<T>,
    m: &GatingMask,
    alpha: f64,
    upstream: &FeatureMap<T>,
) -> Result<FusionGrad<T>> {
    check_fusion(f_in, f_ref, m)?;
    if !upstream.same_shape(f_in) {
        return shape_err("upstream gradient shape differs from F_in");
    }
    let n = f_in.voxels();
    let a = T::of(alpha);
    let g_ref = par::map_range(upstream.data.len(), |i| if m.data[i % n] { a * upstream.data[i] } else { T::zero() });
    let g_alpha = sum_by(upstream.data.len(), |i| {
        if m.data[i % n] { f_ref.data[i].as_f64() * upstream.data[i].as_f64() } else { 0.0 }
    });
    Ok(FusionGrad {
        f_in: upstream.clone(),
        f_ref: FeatureMap::new(f_in.channels, f_in.dims, g_ref)?,
        alpha: g_alpha,
    })
}

/// Refiner plus gated fusion with the refiner's own `alpha`.
pub fn agbr_forward<T: Real>(f_in: &FeatureMap<T>, m: &GatingMask, p: &RefinerParams) -> Result<FeatureMap<T>> {
    let f_ref = refiner_forward(f_in, p)?;
    gated_fusion(f_in, &f_ref, m, p.alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prob(vals: &[f64]) -> ProbVolume<f64> {
        ProbVolume::single(Grid::unit([1, 1, vals.len()]), vals.to_vec()).unwrap()
    }

    #[test]
    fn foreground_prob_cases() {
        let z = prob(&[0.0, 0.0]);
        let o = prob(&[1.0, 1.0]);
        assert_eq!(foreground_prob(&z, &z).unwrap().data, vec![0.0, 0.0]);
        assert_eq!(foreground_prob(&o, &z).unwrap().data, vec![0.5, 0.5]);
        assert!(foreground_prob(&z, &prob(&[0.0])).is_err());
    }

    #[test]
    fn ambiguity_values() {
        let a = ambiguity_field(&prob(&[0.5, 0.0, 1.0, 0.25])).unwrap();
        assert_eq!(a.data, vec![1.0, 0.0, 0.0, 0.75]);
        assert!(ambiguity_field(&prob(&[1.5])).is_err());
    }

    #[test]
    fn gate_band_edges() {
        let a = ambiguity_field(&prob(&[0.5, 0.3881, 0.39, 0.6119, 0.61])).unwrap();
        let m = gating_mask(&a, 0.95).unwrap();
        assert_eq!(m.data, vec![true, false, true, false, true]);
        assert_eq!(m.tau, 0.95);
        let all = gating_mask(&ambiguity_field(&prob(&[0.5, 0.4])).unwrap(), 1.0).unwrap();
        assert_eq!(all.active(), 0);
        let ends = ambiguity_field(&prob(&[0.0, 1.0, 0.5])).unwrap();
        assert_eq!(gating_mask(&ends, 0.0).unwrap().active(), 3);
        assert!(gating_mask(&a, -0.1).is_err());
        assert!(gating_mask(&a, 1.01).is_err());
    }

    #[test]
    fn band_solution() {
        let (lo, hi) = active_band(0.95).unwrap();
        assert!((lo - 0.3882).abs() < 1e-4 && (hi - 0.6118).abs() < 1e-4);
        assert!((ambiguity(lo) - 0.95).abs() < 1e-12);
    }

    #[test]
    fn fusion_identities() {
        let g = Grid::unit([1, 2, 2]);
        let f_in = FeatureMap::new(2, [1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let f_ref = FeatureMap::new(2, [1, 2, 2], vec![0.5f32; 8]).unwrap();
        let on = GatingMask { grid: g, data: vec![true; 4], tau: 0.95 };
        let off = GatingMask { grid: g, data: vec![false; 4], tau: 0.95 };
        assert_eq!(gated_fusion(&f_in, &f_ref, &on, 0.0).unwrap(), f_in);
        assert_eq!(gated_fusion(&f_in, &f_ref, &off, 3.0).unwrap(), f_in);
        let sum = gated_fusion(&f_in, &f_ref, &on, 1.0).unwrap();
        assert_eq!(sum.data, f_in.data.iter().map(|v| v + 0.5).collect::<Vec<_>>());
        let up = FeatureMap::new(2, [1, 2, 2], vec![1.0f32; 8]).unwrap();
        let g0 = gated_fusion_grad(&f_in, &f_ref, &on, 0.0, &up).unwrap();
        assert_eq!(g0.f_in, up);
        assert!(g0.f_ref.data.iter().all(|&v| v == 0.0));
        assert_eq!(gated_fusion_grad(&f_in, &f_ref, &off, 1.0, &up).unwrap().alpha, 0.0);
        let bad = GatingMask { grid: Grid::unit([1, 1, 4]), data: vec![true; 4], tau: 0.95 };
        assert!(gated_fusion(&f_in, &f_ref, &bad, 1.0).is_err());
    }

    #[test]
    fn refiner_zero_and_identity_chain() {
        let x = FeatureMap::new(2, [2, 2, 2], (0..16).map(|i| i as f32 - 8.0).collect()).unwrap();
        let zero = RefinerParams::zeros(2, 1);
        assert!(refiner_forward(&x, &zero).unwrap().data.iter().all(|&v| v == 0.0));
        let id = RefinerParams::new(
            Conv3dParams::identity(2, 3),
            Conv3dParams::identity(2, 3),
            Conv3dParams::identity(2, 1),
            0.0,
        )
        .unwrap();
        let y = refiner_forward(&x, &id).unwrap();
        assert_eq!(y.data, x.data.iter().map(|&v| v.max(0.0)).collect::<Vec<_>>());
        let broken = RefinerParams { conv3: Conv3dParams::zeros(3, 1, 1), ..RefinerParams::zeros(2, 1) };
        assert!(refiner_forward(&x, &broken).is_err());
    }
}
