//! Core volume types.
//!
//! All grids are C-contiguous in `(z, y, x)` = `(D, H, W)` order. Spacing and
//! origin arrays follow the same axis order; physical points handed out by
//! [`Grid::position_mm`] are `(x, y, z)` in millimetres.

use std::fmt::Debug;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};

/// Floating-point element type for feature maps and probability volumes.
pub trait Real: Float + Debug + Default + Send + Sync + 'static {
    fn as_f64(self) -> f64;
    fn of(v: f64) -> Self;
}

impl Real for f32 {
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
}

/// Spatial layout shared by every volume type.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    /// Millimetres per voxel along `(z, y, x)`.
    pub spacing: [f64; 3],
    /// Position of voxel `(0, 0, 0)` along `(z, y, x)` in millimetres.
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::with_origin(dims, spacing, [0.0; 3])
    }

    pub fn with_origin(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return arg_err(format!("dimensions must be positive, got {dims:?}"));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return arg_err(format!("spacing must be positive and finite, got {spacing:?}"));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return arg_err(format!("origin must be finite, got {origin:?}"));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Unit-spaced grid at the origin. Panics on a zero dimension.
    pub fn unit(dims: [usize; 3]) -> Self {
        Self::new(dims, [1.0; 3]).expect("non-zero dims")
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.dims[2];
        let yz = i / self.dims[2];
        [yz / self.dims[1], yz % self.dims[1], x]
    }

    /// Voxel centre in millimetres, returned as `(x, y, z)`.
    #[inline]
    pub fn position_mm(&self, z: usize, y: usize, x: usize) -> [f64; 3] {
        [
            self.origin[2] + x as f64 * self.spacing[2],
            self.origin[1] + y as f64 * self.spacing[1],
            self.origin[0] + z as f64 * self.spacing[0],
        ]
    }

    /// Length of the voxel diagonal.
    pub fn diagonal(&self) -> f64 {
        self.spacing.iter().map(|s| s * s).sum::<f64>().sqrt()
    }

    pub fn same_geometry(&self, other: &Grid) -> bool {
        self.dims == other.dims && self.spacing == other.spacing && self.origin == other.origin
    }

    pub(crate) fn require_dims(&self, other: &Grid, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return shape_err(format!("{what}: dims {:?} vs {:?}", self.dims, other.dims));
        }
        Ok(())
    }

    /// Offsets of the in-bounds 6-neighbours of `(z, y, x)`.
    pub(crate) fn neighbors6(&self, z: usize, y: usize, x: usize) -> impl Iterator<Item = Option<usize>> + '_ {
        const STEPS: [(isize, isize, isize); 6] =
            [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];
        STEPS.iter().map(move |&(dz, dy, dx)| {
            let nz = z as isize + dz;
            let ny = y as isize + dy;
            let nx = x as isize + dx;
            if nz < 0
                || ny < 0
                || nx < 0
                || nz >= self.dims[0] as isize
                || ny >= self.dims[1] as isize
                || nx >= self.dims[2] as isize
            {
                None
            } else {
                Some(self.index(nz as usize, ny as usize, nx as usize))
            }
        })
    }
}

/// Single-channel voxel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    pub grid: Grid,
    pub data: Vec<T>,
}

/// Intensity volume (CBCT image, signed distance prior, ...).
pub type ScalarVolume = Volume<f32>;

impl<T: Clone> Volume<T> {
    pub fn from_vec(grid: Grid, data: Vec<T>) -> Result<Self> {
        if data.len() != grid.len() {
            return shape_err(format!("data length {} != {} voxels", data.len(), grid.len()));
        }
        Ok(Self { grid, data })
    }

    pub fn filled(grid: Grid, value: T) -> Self {
        Self { data: vec![value; grid.len()], grid }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> &T {
        &self.data[self.grid.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: T) {
        let i = self.grid.index(z, y, x);
        self.data[i] = v;
    }
}

impl ScalarVolume {
    /// Checks the finite-values invariant.
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return arg_err(format!("non-finite value at voxel {i}"));
        }
        Ok(())
    }
}

/// Integer segmentation with an explicit class count.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub grid: Grid,
    pub data: Vec<u16>,
    pub num_classes: u16,
}

impl LabelVolume {
    pub fn new(grid: Grid, data: Vec<u16>, num_classes: u16) -> Result<Self> {
        if data.len() != grid.len() {
            return shape_err(format!("data length {} != {} voxels", data.len(), grid.len()));
        }
        if let Some(&bad) = data.iter().find(|&&v| v >= num_classes) {
            return arg_err(format!("label {bad} >= num_classes {num_classes}"));
        }
        Ok(Self { grid, data, num_classes })
    }

    /// Builds a label volume whose class count is `max(label) + 1`.
    pub fn from_labels(grid: Grid, data: Vec<u16>) -> Result<Self> {
        let n = data.iter().copied().max().unwrap_or(0) + 1;
        Self::new(grid, data, n)
    }

    pub fn background(grid: Grid, num_classes: u16) -> Self {
        Self { data: vec![0; grid.len()], grid, num_classes: num_classes.max(1) }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> u16 {
        self.data[self.grid.index(z, y, x)]
    }

    pub fn count(&self, class: u16) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    /// Classes with at least one voxel, ascending.
    pub fn present_classes(&self) -> Vec<u16> {
        let mut seen = vec![false; self.num_classes as usize];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..self.num_classes).filter(|&c| seen[c as usize]).collect()
    }
}

/// Probability volume with `channels` planes stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVolume<T = f32> {
    pub grid: Grid,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> ProbVolume<T> {
    pub fn new(grid: Grid, channels: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 {
            return arg_err("probability volume needs at least one channel");
        }
        if data.len() != channels * grid.len() {
            return shape_err(format!(
                "data length {} != {channels} x {} voxels",
                data.len(),
                grid.len()
            ));
        }
        Ok(Self { grid, channels, data })
    }

    pub fn single(grid: Grid, data: Vec<T>) -> Result<Self> {
        Self::new(grid, 1, data)
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.grid.len()
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    /// Checks range and, for multi-channel volumes, the per-voxel sum.
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !(*v >= T::zero() && *v <= T::one())) {
            return arg_err(format!("probability outside [0,1] at element {i}"));
        }
        if self.channels > 1 {
            let n = self.voxels();
            for v in 0..n {
                let s: f64 = (0..self.channels).map(|c| self.data[c * n + v].as_f64()).sum();
                if (s - 1.0).abs() > 1e-4 {
                    return arg_err(format!("channel sum {s} at voxel {v} is not 1"));
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ProbVolume<U> {
        ProbVolume {
            grid: self.grid,
            channels: self.channels,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// `C x D x H x W` activation tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32> {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(channels: usize, dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        if channels == 0 {
            return arg_err("feature map needs at least one channel");
        }
        if data.len() != channels * dims.iter().product::<usize>() {
            return shape_err(format!("data length {} != {channels} x {dims:?}", data.len()));
        }
        Ok(Self { channels, dims, data })
    }

    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self { channels, dims, data: vec![T::zero(); channels * dims.iter().product::<usize>()] }
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &FeatureMap<T>) -> bool {
        self.channels == other.channels && self.dims == other.dims
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return arg_err(format!("non-finite feature at element {i}"));
        }
        Ok(())
    }
}

impl<T: Real> From<ProbVolume<T>> for FeatureMap<T> {
    fn from(p: ProbVolume<T>) -> Self {
        FeatureMap { channels: p.channels, dims: p.grid.dims, data: p.data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_and_coords_roundtrip() {
        let g = Grid::unit([3, 4, 5]);
        for i in 0..g.len() {
            let [z, y, x] = g.coords(i);
            assert_eq!(g.index(z, y, x), i);
        }
    }

    #[test]
    fn rejects_bad_spacing_and_labels() {
        assert!(Grid::new([2, 2, 2], [1.0, 0.0, 1.0]).is_err());
        let g = Grid::unit([1, 1, 2]);
        assert!(LabelVolume::new(g, vec![0, 3], 3).is_err());
    }

    #[test]
    fn position_is_xyz() {
        let g = Grid::with_origin([2, 2, 2], [3.0, 2.0, 1.0], [10.0, 20.0, 30.0]).unwrap();
        assert_eq!(g.position_mm(1, 1, 1), [31.0, 22.0, 13.0]);
    }

    #[test]
    fn prob_validate_channel_sum() {
        let g = Grid::unit([1, 1, 1]);
        assert!(ProbVolume::new(g, 2, vec![0.3f32, 0.7]).unwrap().validate().is_ok());
        assert!(ProbVolume::new(g, 2, vec![0.3f32, 0.6]).unwrap().validate().is_err());
    }
}
