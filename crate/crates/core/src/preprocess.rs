//! Intensity normalisation, patching, augmentation and resampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::par;
use crate::volume::{Grid, LabelVolume, ProbVolume, Real, ScalarVolume, Volume};

/// `(x - mean) / std` with caller-supplied statistics.
pub fn zscore_normalize(vol: &ScalarVolume, mean: f64, std: f64) -> Result<ScalarVolume> {
    if !(std > 0.0) || !std.is_finite() || !mean.is_finite() {
        return arg_err(format!("z-score needs finite mean and std > 0, got mean={mean}, std={std}"));
    }
    let data = par::map_slice(&vol.data, |&v| ((v as f64 - mean) / std) as f32);
    Ok(Volume { grid: vol.grid, data })
}

/// Sub-volume location, in voxels of the parent. Offsets may be negative or
/// overhang the far edge; the padding policy fills those voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub size: [usize; 3],
    pub offset: [isize; 3],
}

impl PatchSpec {
    pub fn new(size: [usize; 3], offset: [isize; 3]) -> Self {
        Self { size, offset }
    }

    pub fn at(size: [usize; 3], offset: [usize; 3]) -> Self {
        Self { size, offset: offset.map(|o| o as isize) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Zero,
    Mirror,
}

/// Reflects `i` into `0..n` without repeating the edge sample.
fn mirror_index(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

fn resolve(i: isize, n: usize, pad: Padding) -> Option<usize> {
    if (0..n as isize).contains(&i) {
        Some(i as usize)
    } else {
        match pad {
            Padding::Zero => None,
            Padding::Mirror => Some(mirror_index(i, n)),
        }
    }
}

fn patch_grid(parent: &Grid, spec: &PatchSpec) -> Result<Grid> {
    if spec.size.contains(&0) {
        return arg_err(format!("patch size must be positive, got {:?}", spec.size));
    }
    let origin = [0, 1, 2].map(|a| parent.origin[a] + spec.offset[a] as f64 * parent.spacing[a]);
    Grid::with_origin(spec.size, parent.spacing, origin)
}

fn gather<T: Copy + Send + Sync>(
    parent: &Grid,
    channels: usize,
    data: &[T],
    spec: &PatchSpec,
    pad: Padding,
    fill: T,
) -> Vec<T> {
    let [pd, ph, pw] = spec.size;
    let n_in = parent.len();
    let mut out = vec![fill; channels * pd * ph * pw];
    let row = pw;
    par::for_each_chunk_mut(&mut out, row, |r, dst| {
        let c = r / (pd * ph);
        let zy = r % (pd * ph);
        let (z, y) = (zy / ph, zy % ph);
        let sz = resolve(spec.offset[0] + z as isize, parent.dims[0], pad);
        let sy = resolve(spec.offset[1] + y as isize, parent.dims[1], pad);
        let (Some(sz), Some(sy)) = (sz, sy) else { return };
        for (x, d) in dst.iter_mut().enumerate() {
            if let Some(sx) = resolve(spec.offset[2] + x as isize, parent.dims[2], pad) {
                *d = data[c * n_in + parent.index(sz, sy, sx)];
            }
        }
    });
    out
}

/// Copies a window of `vol`; voxels outside the parent follow `pad`.
pub fn extract_patch<T: Copy + Default + Send + Sync>(
    vol: &Volume<T>,
    spec: &PatchSpec,
    pad: Padding,
) -> Result<Volume<T>> {
    let grid = patch_grid(&vol.grid, spec)?;
    let data = gather(&vol.grid, 1, &vol.data, spec, pad, T::default());
    Ok(Volume { grid, data })
}

pub fn extract_label_patch(labels: &LabelVolume, spec: &PatchSpec, pad: Padding) -> Result<LabelVolume> {
    let grid = patch_grid(&labels.grid, spec)?;
    let data = gather(&labels.grid, 1, &labels.data, spec, pad, 0);
    Ok(LabelVolume { grid, data, num_classes: labels.num_classes })
}

pub fn extract_prob_patch<T: Real>(prob: &ProbVolume<T>, spec: &PatchSpec, pad: Padding) -> Result<ProbVolume<T>> {
    let grid = patch_grid(&prob.grid, spec)?;
    let data = gather(&prob.grid, prob.channels, &prob.data, spec, pad, T::zero());
    Ok(ProbVolume { grid, channels: prob.channels, data })
}

/// Seeded sampler of in-bounds random crops.
pub struct PatchSampler {
    rng: ChaCha8Rng,
}

impl PatchSampler {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform crop location such that the patch lies inside `dims`.
    pub fn sample(&mut self, dims: [usize; 3], size: [usize; 3]) -> Result<PatchSpec> {
        if size.contains(&0) {
            return arg_err("patch size must be positive");
        }
        let mut offset = [0isize; 3];
        for a in 0..3 {
            if size[a] > dims[a] {
                return arg_err(format!("patch {size:?} larger than volume {dims:?}"));
            }
            offset[a] = self.rng.random_range(0..=dims[a] - size[a]) as isize;
        }
        Ok(PatchSpec { size, offset })
    }
}

/// Geometric augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Rotation angles about the x, y and z axes, in degrees.
    pub rot_deg: [f64; 3],
    /// Flip flags along `(z, y, x)`.
    pub flips: [bool; 3],
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self { rot_deg: [0.0; 3], flips: [false; 3] }
    }

    /// Draws uniform angles in `±max_rot_deg` and independent flips.
    pub fn sample(seed: u64, cfg: &AugmentConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = cfg.max_rot_deg;
        let rot_deg = [0; 3].map(|_| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 });
        let flips = [0; 3].map(|_| rng.random_bool(cfg.flip_prob));
        Self { rot_deg, flips }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub max_rot_deg: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { max_rot_deg: 15.0, flip_prob: 0.5 }
    }
}

/// Row-major 3x3 rotation acting on `(x, y, z)`; `R = Rz * Ry * Rx`.
fn rotation_matrix(rot_deg: [f64; 3]) -> [[f64; 3]; 3] {
    let [ax, ay, az] = rot_deg.map(f64::to_radians);
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    matmul(&rz, &matmul(&ry, &rx))
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 { r } else { v }
}

/// Maps every output voxel to a continuous source index `(z, y, x)`.
struct Warp {
    grid: Grid,
    rot_t: [[f64; 3]; 3],
    flips: [bool; 3],
    identity_rot: bool,
}

impl Warp {
    fn source(&self, z: usize, y: usize, x: usize) -> [f64; 3] {
        let d = self.grid.dims;
        let unflip = |i: usize, n: usize, f: bool| if f { n - 1 - i } else { i };
        let (z, y, x) = (unflip(z, d[0], self.flips[0]), unflip(y, d[1], self.flips[1]), unflip(x, d[2], self.flips[2]));
        if self.identity_rot {
            return [z as f64, y as f64, x as f64];
        }
        let s = self.grid.spacing;
        let c = [(d[2] - 1) as f64 / 2.0, (d[1] - 1) as f64 / 2.0, (d[0] - 1) as f64 / 2.0];
        // output position in mm relative to the centre, (x, y, z)
        let p = [(x as f64 - c[0]) * s[2], (y as f64 - c[1]) * s[1], (z as f64 - c[2]) * s[0]];
        let mut q = [0.0; 3];
        for (i, qi) in q.iter_mut().enumerate() {
            *qi = (0..3).map(|k| self.rot_t[i][k] * p[k]).sum();
        }
        [snap(q[2] / s[0] + c[2]), snap(q[1] / s[1] + c[1]), snap(q[0] / s[2] + c[0])]
    }
}

fn trilinear(vol: &ScalarVolume, src: [f64; 3]) -> f32 {
    let d = vol.grid.dims;
    let base = src.map(f64::floor);
    let frac = [src[0] - base[0], src[1] - base[1], src[2] - base[2]];
    let mut acc = 0.0f64;
    for corner in 0..8 {
        let off = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let wa = if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            w *= wa;
            let i = base[a] as isize + off[a] as isize;
            if i < 0 || i >= d[a] as isize {
                inside = false;
            } else {
                idx[a] = i as usize;
            }
        }
        if w != 0.0 && inside {
            acc += w * *vol.get(idx[0], idx[1], idx[2]) as f64;
        }
    }
    acc as f32
}

fn nearest(labels: &LabelVolume, src: [f64; 3]) -> u16 {
    let d = labels.grid.dims;
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let i = src[a].round();
        if i < 0.0 || i >= d[a] as f64 {
            return 0;
        }
        idx[a] = i as usize;
    }
    labels.get(idx[0], idx[1], idx[2])
}

/// Applies the same rotation (about the volume centre) and flips to an image
/// (trilinear, zero fill) and its labels (nearest, background fill).
pub fn augment(
    image: &ScalarVolume,
    labels: &LabelVolume,
    params: &AugmentParams,
    cfg: &AugmentConfig,
) -> Result<(ScalarVolume, LabelVolume)> {
    image.grid.require_dims(&labels.grid, "augment image/labels")?;
    if let Some(r) = params.rot_deg.iter().find(|r| r.abs() > cfg.max_rot_deg || !r.is_finite()) {
        return arg_err(format!("rotation {r} deg outside ±{} deg", cfg.max_rot_deg));
    }
    let m = rotation_matrix(params.rot_deg);
    let mut rot_t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rot_t[i][j] = m[j][i];
        }
    }
    let warp = Warp {
        grid: image.grid,
        rot_t,
        flips: params.flips,
        identity_rot: params.rot_deg.iter().all(|&r| r == 0.0),
    };
    let g = image.grid;
    let sources = par::map_range(g.len(), |i| {
        let [z, y, x] = g.coords(i);
        warp.source(z, y, x)
    });
    let img = par::map_slice(&sources, |&s| trilinear(image, s));
    let lab = par::map_slice(&sources, |&s| nearest(labels, s));
    Ok((
        Volume { grid: g, data: img },
        LabelVolume { grid: labels.grid, data: lab, num_classes: labels.num_classes },
    ))
}

/// Samples parameters from `seed` and applies them.
pub fn augment_random(
    image: &ScalarVolume,
    labels: &LabelVolume,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(ScalarVolume, LabelVolume, AugmentParams)> {
    let params = AugmentParams::sample(seed, cfg);
    let (i, l) = augment(image, labels, &params, cfg)?;
    Ok((i, l, params))
}

/// Nearest-neighbour decimation keeping voxels at multiples of `factor`.
pub fn downsample_labels(labels: &LabelVolume, factor: [usize; 3]) -> Result<LabelVolume> {
    if factor.contains(&0) {
        return arg_err(format!("downsampling factor must be >= 1, got {factor:?}"));
    }
    let d = labels.grid.dims;
    let out_dims = [d[0].div_ceil(factor[0]), d[1].div_ceil(factor[1]), d[2].div_ceil(factor[2])];
    let spacing = [0, 1, 2].map(|a| labels.grid.spacing[a] * factor[a] as f64);
    let grid = Grid::with_origin(out_dims, spacing, labels.grid.origin)?;
    let data = par::map_range(grid.len(), |i| {
        let [z, y, x] = grid.coords(i);
        labels.get(z * factor[0], y * factor[1], x * factor[2])
    });
    Ok(LabelVolume { grid, data, num_classes: labels.num_classes })
}

fn resampled_grid(g: &Grid, dims: [usize; 3]) -> Result<(Grid, [f64; 3])> {
    if dims.contains(&0) {
        return arg_err("target dims must be positive");
    }
    let scale = [0, 1, 2].map(|a| g.dims[a] as f64 / dims[a] as f64);
    let spacing = [0, 1, 2].map(|a| g.spacing[a] * scale[a]);
    let origin = [0, 1, 2].map(|a| g.origin[a] + (0.5 * scale[a] - 0.5) * g.spacing[a]);
    Ok((Grid::with_origin(dims, spacing, origin)?, scale))
}

/// Centre-aligned trilinear resampling with edge clamping.
pub fn resample_trilinear(vol: &ScalarVolume, dims: [usize; 3]) -> Result<ScalarVolume> {
    let (grid, scale) = resampled_grid(&vol.grid, dims)?;
    let d = vol.grid.dims;
    let data = par::map_range(grid.len(), |i| {
        let c = grid.coords(i);
        let src = [0, 1, 2].map(|a| ((c[a] as f64 + 0.5) * scale[a] - 0.5).clamp(0.0, (d[a] - 1) as f64));
        trilinear(vol, src)
    });
    Ok(Volume { grid, data })
}

fn nearest_source(c: [usize; 3], scale: [f64; 3], d: [usize; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| (((c[a] as f64 + 0.5) * scale[a]).floor() as usize).min(d[a] - 1))
}

/// Centre-aligned nearest-neighbour resampling for labels.
pub fn resample_labels_nearest(labels: &LabelVolume, dims: [usize; 3]) -> Result<LabelVolume> {
    let (grid, scale) = resampled_grid(&labels.grid, dims)?;
    let data = par::map_range(grid.len(), |i| {
        let [z, y, x] = nearest_source(grid.coords(i), scale, labels.grid.dims);
        labels.get(z, y, x)
    });
    Ok(LabelVolume { grid, data, num_classes: labels.num_classes })
}

/// Nearest-neighbour resampling of any single-channel grid.
pub fn resample_nearest<T: Copy + Send + Sync>(vol: &Volume<T>, dims: [usize; 3]) -> Result<Volume<T>> {
    let (grid, scale) = resampled_grid(&vol.grid, dims)?;
    let data = par::map_range(grid.len(), |i| {
        let [z, y, x] = nearest_source(grid.coords(i), scale, vol.grid.dims);
        *vol.get(z, y, x)
    });
    Ok(Volume { grid, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> ScalarVolume {
        let g = Grid::unit(dims);
        Volume { data: (0..g.len()).map(|i| i as f32).collect(), grid: g }
    }

    #[test]
    fn zscore_simple_values() {
        let v = Volume { grid: Grid::unit([1, 1, 2]), data: vec![0.0f32, 2.0] };
        assert_eq!(zscore_normalize(&v, 1.0, 1.0).unwrap().data, vec![-1.0, 1.0]);
        let c = Volume::filled(Grid::unit([2, 2, 2]), 3.5f32);
        assert!(zscore_normalize(&c, 3.5, 1.0).unwrap().data.iter().all(|&x| x == 0.0));
        assert!(zscore_normalize(&c, 0.0, 0.0).is_err());
    }

    #[test]
    fn full_patch_is_identity_and_single_voxel() {
        let v = ramp([3, 3, 3]);
        let p = extract_patch(&v, &PatchSpec::at([3, 3, 3], [0, 0, 0]), Padding::Zero).unwrap();
        assert_eq!(p, v);
        let mut w = Volume::filled(Grid::unit([3, 3, 3]), 0.0f32);
        w.set(1, 1, 1, 7.0);
        let p = extract_patch(&w, &PatchSpec::at([1, 1, 1], [1, 1, 1]), Padding::Zero).unwrap();
        assert_eq!(p.data, vec![7.0]);
        assert!(extract_patch(&w, &PatchSpec::at([0, 1, 1], [0, 0, 0]), Padding::Zero).is_err());
    }

    #[test]
    fn overhang_zero_and_mirror() {
        let v = Volume { grid: Grid::unit([1, 1, 4]), data: vec![1.0f32, 2.0, 3.0, 4.0] };
        let spec = PatchSpec::new([1, 1, 4], [0, 0, 2]);
        assert_eq!(extract_patch(&v, &spec, Padding::Zero).unwrap().data, vec![3.0, 4.0, 0.0, 0.0]);
        assert_eq!(extract_patch(&v, &spec, Padding::Mirror).unwrap().data, vec![3.0, 4.0, 3.0, 2.0]);
        let left = PatchSpec::new([1, 1, 3], [0, 0, -2]);
        assert_eq!(extract_patch(&v, &left, Padding::Mirror).unwrap().data, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn sampler_is_reproducible() {
        let a: Vec<_> = {
            let mut s = PatchSampler::new(42);
            (0..5).map(|_| s.sample([10, 10, 10], [4, 4, 4]).unwrap()).collect()
        };
        let mut s = PatchSampler::new(42);
        for spec in a {
            assert_eq!(s.sample([10, 10, 10], [4, 4, 4]).unwrap(), spec);
            assert!(spec.offset.iter().all(|&o| (0..=6).contains(&o)));
        }
    }

    #[test]
    fn augment_identity_and_double_flip() {
        let img = ramp([3, 4, 5]);
        let lab = LabelVolume::from_labels(img.grid, (0..60).map(|i| (i % 3) as u16).collect()).unwrap();
        let cfg = AugmentConfig::default();
        let (i2, l2) = augment(&img, &lab, &AugmentParams::identity(), &cfg).unwrap();
        assert_eq!((i2, l2), (img.clone(), lab.clone()));
        let flip = AugmentParams { rot_deg: [0.0; 3], flips: [false, false, true] };
        let (a, b) = augment(&img, &lab, &flip, &cfg).unwrap();
        assert_ne!(a, img);
        let (a, b) = augment(&a, &b, &flip, &cfg).unwrap();
        assert_eq!((a, b), (img, lab));
    }

    #[test]
    fn augment_rejects_large_rotation() {
        let img = ramp([3, 3, 3]);
        let lab = LabelVolume::background(img.grid, 2);
        let p = AugmentParams { rot_deg: [0.0, 16.0, 0.0], flips: [false; 3] };
        assert!(augment(&img, &lab, &p, &AugmentConfig::default()).is_err());
    }

    #[test]
    fn rotate_marker_quarter_turn_about_z() {
        // closed form: about the centre c, (x, y) -> (c - (y - c), c + (x - c))
        let n = 5usize;
        let c = 2isize;
        let cfg = AugmentConfig { max_rot_deg: 90.0, flip_prob: 0.5 };
        for (mz, my, mx) in [(2usize, 2usize, 4usize), (1, 0, 3), (4, 3, 1)] {
            let g = Grid::unit([n, n, n]);
            let mut img = Volume::filled(g, 0.0f32);
            img.set(mz, my, mx, 1.0);
            let mut lab = LabelVolume::background(g, 2);
            lab.data[g.index(mz, my, mx)] = 1;
            let p = AugmentParams { rot_deg: [0.0, 0.0, 90.0], flips: [false; 3] };
            let (ri, rl) = augment(&img, &lab, &p, &cfg).unwrap();
            let ex = (c - (my as isize - c)) as usize;
            let ey = (c + (mx as isize - c)) as usize;
            assert_eq!(*ri.get(mz, ey, ex), 1.0);
            assert_eq!(rl.get(mz, ey, ex), 1);
            assert_eq!(rl.count(1), 1);
            assert_eq!(ri.data.iter().filter(|&&v| v != 0.0).count(), 1);
        }
    }

    #[test]
    fn downsample_checkerboard() {
        let g = Grid::unit([4, 4, 4]);
        let data: Vec<u16> = (0..64).map(|i| { let [z, y, x] = g.coords(i); ((z + y + x) % 2) as u16 }).collect();
        let lab = LabelVolume::new(g, data, 2).unwrap();
        let d = downsample_labels(&lab, [2, 2, 2]).unwrap();
        assert_eq!(d.dims(), [2, 2, 2]);
        // even indices sum to an even number
        assert!(d.data.iter().all(|&v| v == 0));
        assert_eq!(downsample_labels(&lab, [1, 1, 1]).unwrap(), lab);
        assert_eq!(downsample_labels(&lab, [3, 1, 2]).unwrap().dims(), [2, 4, 2]);
        assert!(downsample_labels(&lab, [0, 1, 1]).is_err());
    }

    #[test]
    fn resample_same_dims_is_identity() {
        let v = ramp([3, 4, 2]);
        assert_eq!(resample_trilinear(&v, [3, 4, 2]).unwrap().data, v.data);
        let up = resample_trilinear(&v, [6, 8, 4]).unwrap();
        assert_eq!(up.grid.spacing, [0.5, 0.5, 0.5]);
    }
}
