//! Direct 3D convolution (stride 1, zero padding, cubic kernels).

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::par;
use crate::volume::{FeatureMap, Real};

/// Weights of one convolution layer, `C_out x C_in x k x k x k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv3dParams {
    pub c_out: usize,
    pub c_in: usize,
    pub kernel: usize,
    pub padding: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv3dParams {
    /// Layer with "same" padding (`kernel / 2`).
    pub fn new(c_out: usize, c_in: usize, kernel: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        let p = Self { c_out, c_in, kernel, padding: kernel / 2, weights, bias };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(c_out: usize, c_in: usize, kernel: usize) -> Self {
        Self {
            c_out,
            c_in,
            kernel,
            padding: kernel / 2,
            weights: vec![0.0; c_out * c_in * kernel.pow(3)],
            bias: vec![0.0; c_out],
        }
    }

    /// Kernel that copies input channel `i` to output channel `i`.
    pub fn identity(channels: usize, kernel: usize) -> Self {
        let mut p = Self::zeros(channels, channels, kernel);
        let k3 = kernel.pow(3);
        let centre = (kernel / 2) * (kernel * kernel + kernel + 1);
        for c in 0..channels {
            p.weights[(c * channels + c) * k3 + centre] = 1.0;
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            return arg_err(format!("kernel size {} must be odd", self.kernel));
        }
        if self.c_out == 0 || self.c_in == 0 {
            return arg_err("convolution needs at least one input and output channel");
        }
        if self.weights.len() != self.c_out * self.c_in * self.kernel.pow(3) {
            return shape_err(format!(
                "weights have {} elements, expected {}x{}x{}^3",
                self.weights.len(),
                self.c_out,
                self.c_in,
                self.kernel
            ));
        }
        if self.bias.len() != self.c_out {
            return shape_err(format!("bias has {} elements, expected {}", self.bias.len(), self.c_out));
        }
        Ok(())
    }

    #[inline]
    fn weight(&self, co: usize, ci: usize, kz: usize, ky: usize, kx: usize) -> f64 {
        let k = self.kernel;
        self.weights[(((co * self.c_in + ci) * k + kz) * k + ky) * k + kx] as f64
    }
}

/// Cross-correlation with bias. Spatial dims are preserved for odd kernels
/// with `padding = kernel / 2`; other paddings shrink or grow the output.
pub fn conv3d_forward<T: Real>(x: &FeatureMap<T>, p: &Conv3dParams) -> Result<FeatureMap<T>> {
    p.validate()?;
    if x.channels != p.c_in {
        return shape_err(format!("input has {} channels, layer expects {}", x.channels, p.c_in));
    }
    let [d, h, w] = x.dims;
    let k = p.kernel;
    let pad = p.padding as isize;
    let out_dim = |n: usize| -> Result<usize> {
        let o = n as isize + 2 * pad - k as isize + 1;
        if o < 1 {
            return shape_err(format!("kernel {k} too large for extent {n}"));
        }
        Ok(o as usize)
    };
    let (od, oh, ow) = (out_dim(d)?, out_dim(h)?, out_dim(w)?);
    let n_in = d * h * w;
    let mut out = vec![T::zero(); p.c_out * od * oh * ow];
    // one (c_out, z) slice per task
    par::for_each_chunk_mut(&mut out, oh * ow, |slice, dst| {
        let co = slice / od;
        let oz = slice % od;
        let mut acc = vec![p.bias[co] as f64; oh * ow];
        for ci in 0..p.c_in {
            let src = &x.data[ci * n_in..(ci + 1) * n_in];
            for kz in 0..k {
                let iz = oz as isize + kz as isize - pad;
                if iz < 0 || iz >= d as isize {
                    continue;
                }
                for ky in 0..k {
                    for kx in 0..k {
                        let wgt = p.weight(co, ci, kz, ky, kx);
                        if wgt == 0.0 {
                            continue;
                        }
                        let dx = kx as isize - pad;
                        let x_lo = (-dx).max(0) as usize;
                        let x_hi = ((w as isize - dx).min(ow as isize)).max(0) as usize;
                        if x_lo >= x_hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy as isize + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = (iz as usize * h + iy as usize) * w;
                            let a = &mut acc[oy * ow + x_lo..oy * ow + x_hi];
                            let s = &src[(row as isize + x_lo as isize + dx) as usize..][..x_hi - x_lo];
                            for (av, sv) in a.iter_mut().zip(s) {
                                *av += wgt * sv.as_f64();
                            }
                        }
                    }
                }
            }
        }
        for (o, a) in dst.iter_mut().zip(acc) {
            *o = T::of(a);
        }
    });
    FeatureMap::new(p.c_out, [od, oh, ow], out)
}

/// Elementwise `max(x, 0)`.
pub fn relu<T: Real>(mut x: FeatureMap<T>) -> FeatureMap<T> {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_identity() {
        let x = FeatureMap::new(1, [2, 3, 4], (0..24).map(|i| i as f32 - 5.0).collect()).unwrap();
        let p = Conv3dParams::new(1, 1, 1, vec![1.0], vec![0.0]).unwrap();
        assert_eq!(conv3d_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn box_kernel_on_delta_is_clipped_box() {
        let mut x = FeatureMap::<f32>::zeros(1, [4, 4, 4]);
        x.data[0] = 1.0; // corner voxel
        let p = Conv3dParams::new(1, 1, 3, vec![1.0; 27], vec![0.0]).unwrap();
        let y = conv3d_forward(&x, &p).unwrap();
        for z in 0..4 {
            for yy in 0..4 {
                for xx in 0..4 {
                    let expect = if z <= 1 && yy <= 1 && xx <= 1 { 1.0 } else { 0.0 };
                    assert_eq!(y.data[(z * 4 + yy) * 4 + xx], expect);
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_and_even_kernel() {
        let x = FeatureMap::<f32>::zeros(2, [2, 2, 2]);
        assert!(conv3d_forward(&x, &Conv3dParams::zeros(1, 1, 1)).is_err());
        assert!(Conv3dParams::new(1, 2, 2, vec![0.0; 16], vec![0.0]).is_err());
    }

    #[test]
    fn identity_helper_copies_channels() {
        let x = FeatureMap::new(2, [3, 3, 3], (0..54).map(|i| (i as f32).sin()).collect()).unwrap();
        assert_eq!(conv3d_forward(&x, &Conv3dParams::identity(2, 3)).unwrap(), x);
    }
}
