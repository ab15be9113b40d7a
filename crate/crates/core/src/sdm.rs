//! Exact signed distance maps on voxel grids.
//!
//! For a target set `S`, the boundary `∂S` is the set of voxels of `S` with
//! at least one 6-neighbour outside `S` (the volume border does not count).
//! Every voxel receives its Euclidean distance (in mm, honouring anisotropic
//! spacing) from its centre to the nearest boundary voxel centre; the sign is
//! negative strictly inside `S`, zero on `∂S` and positive outside.
//!
//! Distances come from a separable squared-distance transform: one exact
//! lower-envelope-of-parabolas pass per axis. With integer spacings every
//! intermediate value is an integer, so results are bit-exact against the
//! brute-force oracle.

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{Grid, LabelVolume, ScalarVolume, Volume};

/// Which classes the distance map was built from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SdmSource {
    Class(u16),
    ForegroundUnion(Vec<u16>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignedDistanceVolume {
    pub grid: Grid,
    /// Signed distance in millimetres.
    pub data: Vec<f32>,
    /// Signed squared distance, `sign * d^2`, before the square root.
    pub squared: Vec<f64>,
    pub source: SdmSource,
}

impl SignedDistanceVolume {
    pub fn to_scalar(&self) -> ScalarVolume {
        Volume { grid: self.grid, data: self.data.clone() }
    }
}

/// Largest volume the brute-force oracle accepts.
pub const ORACLE_MAX_VOXELS: usize = 24 * 24 * 24;

fn source_of(target: &[u16]) -> SdmSource {
    match target {
        [c] => SdmSource::Class(*c),
        many => SdmSource::ForegroundUnion(many.to_vec()),
    }
}

/// Target membership and boundary flags.
pub fn partition(labels: &LabelVolume, target: &[u16]) -> Result<(Vec<bool>, Vec<bool>)> {
    let mut member = vec![false; labels.num_classes.max(1) as usize];
    for &c in target {
        if let Some(m) = member.get_mut(c as usize) {
            *m = true;
        }
    }
    let inside: Vec<bool> = labels.data.iter().map(|&l| member[l as usize]).collect();
    let fg = inside.iter().filter(|&&v| v).count();
    if fg == 0 {
        return Err(Error::NoBoundary(format!("classes {target:?} are absent")));
    }
    if fg == inside.len() {
        return Err(Error::NoBoundary(format!("classes {target:?} fill the whole volume")));
    }
    let g = labels.grid;
    let boundary = par::map_range(g.len(), |i| {
        if !inside[i] {
            return false;
        }
        let [z, y, x] = g.coords(i);
        g.neighbors6(z, y, x).any(|n| matches!(n, Some(j) if !inside[j]))
    });
    Ok((inside, boundary))
}

/// One-dimensional squared distance transform of `f` with weight `w`
/// (squared spacing): `out[q] = min_p f[p] + w (q - p)^2`.
fn envelope_1d(f: &[f64], w: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        let qf = q as f64;
        let mut s = f64::NEG_INFINITY;
        while let Some(&p) = v.last() {
            let pf = p as f64;
            s = ((fq + w * (qf * qf)) - (f[p] + w * (pf * pf))) / (2.0 * w * (qf - pf));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
                s = f64::NEG_INFINITY;
            } else {
                break;
            }
        }
        v.push(q);
        z.push(s);
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < v.len() && z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = w * (d * d) + f[v[k]];
    }
}

/// Squared Euclidean distance from each voxel centre to the nearest site.
pub fn squared_distance_to_sites(grid: &Grid, sites: &[bool]) -> Vec<f64> {
    let [d, h, w] = grid.dims;
    let [wz, wy, wx] = grid.spacing.map(|s| s * s);
    let mut g: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();

    // z lines: one task per y row, scattered back afterwards
    let cols = par::map_range(h, |y| {
        let mut f = vec![0.0; d];
        let mut out = vec![0.0; d];
        let (mut v, mut zb) = (Vec::with_capacity(d), Vec::with_capacity(d + 1));
        let mut res = vec![0.0; w * d];
        for x in 0..w {
            for z in 0..d {
                f[z] = g[grid.index(z, y, x)];
            }
            envelope_1d(&f, wz, &mut out, &mut v, &mut zb);
            res[x * d..(x + 1) * d].copy_from_slice(&out);
        }
        res
    });
    for (y, res) in cols.iter().enumerate() {
        for x in 0..w {
            for z in 0..d {
                g[grid.index(z, y, x)] = res[x * d + z];
            }
        }
    }

    // y lines inside each z slab
    par::for_each_chunk_mut(&mut g, h * w, |_, slab| {
        let mut f = vec![0.0; h];
        let mut out = vec![0.0; h];
        let (mut v, mut zb) = (Vec::with_capacity(h), Vec::with_capacity(h + 1));
        for x in 0..w {
            for y in 0..h {
                f[y] = slab[y * w + x];
            }
            envelope_1d(&f, wy, &mut out, &mut v, &mut zb);
            for y in 0..h {
                slab[y * w + x] = out[y];
            }
        }
    });

    // contiguous x rows
    par::for_each_chunk_mut(&mut g, w, |_, row| {
        let f = row.to_vec();
        let (mut v, mut zb) = (Vec::with_capacity(w), Vec::with_capacity(w + 1));
        envelope_1d(&f, wx, row, &mut v, &mut zb);
    });
    g
}

fn assemble(labels: &LabelVolume, target: &[u16], inside: &[bool], boundary: &[bool], sq: Vec<f64>) -> SignedDistanceVolume {
    let signed: Vec<f64> = (0..sq.len())
        .map(|i| if boundary[i] { 0.0 } else if inside[i] { -sq[i] } else { sq[i] })
        .collect();
    let data = signed
        .iter()
        .map(|&s| if s < 0.0 { -(-s).sqrt() as f32 } else { s.sqrt() as f32 })
        .collect();
    SignedDistanceVolume { grid: labels.grid, data, squared: signed, source: source_of(target) }
}

/// Exact signed distance map of the union of `target` classes.
pub fn signed_distance_map(labels: &LabelVolume, target: &[u16]) -> Result<SignedDistanceVolume> {
    let (inside, boundary) = partition(labels, target)?;
    let sq = squared_distance_to_sites(&labels.grid, &boundary);
    Ok(assemble(labels, target, &inside, &boundary, sq))
}

/// Exhaustive O(n * |∂S|) reference for volumes up to [`ORACLE_MAX_VOXELS`].
pub fn sdm_bruteforce_oracle(labels: &LabelVolume, target: &[u16]) -> Result<SignedDistanceVolume> {
    let g = labels.grid;
    if g.len() > ORACLE_MAX_VOXELS {
        return Err(Error::TooLarge { voxels: g.len(), limit: ORACLE_MAX_VOXELS });
    }
    let (inside, boundary) = partition(labels, target)?;
    let sites: Vec<[usize; 3]> = (0..g.len()).filter(|&i| boundary[i]).map(|i| g.coords(i)).collect();
    let [wz, wy, wx] = g.spacing.map(|s| s * s);
    let sq = (0..g.len())
        .map(|i| {
            let [z, y, x] = g.coords(i);
            sites
                .iter()
                .map(|s| {
                    let dz = z as f64 - s[0] as f64;
                    let dy = y as f64 - s[1] as f64;
                    let dx = x as f64 - s[2] as f64;
                    wz * (dz * dz) + wy * (dy * dy) + wx * (dx * dx)
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(assemble(labels, target, &inside, &boundary, sq))
}

/// Largest `|φ(u) - φ(v)| - spacing` over 6-neighbour pairs; `<= 0` means
/// the map is 1-Lipschitz on the grid.
pub fn lipschitz_excess(sdm: &SignedDistanceVolume) -> f64 {
    let phi = |sq: f64| sq.signum() * sq.abs().sqrt();
    let g = sdm.grid;
    let mut worst = f64::NEG_INFINITY;
    for i in 0..g.len() {
        let [z, y, x] = g.coords(i);
        let steps = [(z + 1 < g.dims[0], g.dims[1] * g.dims[2], 0), (y + 1 < g.dims[1], g.dims[2], 1), (x + 1 < g.dims[2], 1, 2)];
        for (ok, stride, axis) in steps {
            if ok {
                let diff = (phi(sdm.squared[i]) - phi(sdm.squared[i + stride])).abs();
                worst = worst.max(diff - g.spacing[axis]);
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(vals: &[u16]) -> LabelVolume {
        LabelVolume::new(Grid::unit([1, 1, vals.len()]), vals.to_vec(), 2).unwrap()
    }

    #[test]
    fn row_example() {
        // both foreground voxels touch background, so both are boundary
        let s = signed_distance_map(&row(&[0, 0, 1, 1, 0]), &[1]).unwrap();
        assert_eq!(s.data, vec![2.0, 1.0, 0.0, 0.0, 1.0]);
        let s = signed_distance_map(&row(&[0, 1, 1, 1, 1, 1, 0]), &[1]).unwrap();
        assert_eq!(s.data, vec![1.0, 0.0, -1.0, -2.0, -1.0, 0.0, 1.0]);
        assert_eq!(s.source, SdmSource::Class(1));
    }

    #[test]
    fn corner_neighbour_is_sqrt3() {
        let g = Grid::unit([5, 5, 5]);
        let mut lab = LabelVolume::background(g, 2);
        lab.data[g.index(2, 2, 2)] = 1;
        let s = signed_distance_map(&lab, &[1]).unwrap();
        assert_eq!(s.data[g.index(2, 2, 2)], 0.0);
        assert_eq!(s.squared[g.index(3, 3, 3)], 3.0);
        assert_eq!(s.data[g.index(3, 3, 3)], 3f32.sqrt());
        assert_eq!(s.data[g.index(0, 0, 0)], (12f64).sqrt() as f32);
    }

    #[test]
    fn anisotropic_spacing() {
        let g = Grid::new([3, 1, 3], [2.0, 1.0, 0.5]).unwrap();
        let mut lab = LabelVolume::background(g, 2);
        lab.data[g.index(0, 0, 0)] = 1;
        let s = signed_distance_map(&lab, &[1]).unwrap();
        assert_eq!(s.data[g.index(2, 0, 2)], (16.0f64 + 1.0).sqrt() as f32);
    }

    #[test]
    fn degenerate_inputs_error() {
        assert!(matches!(signed_distance_map(&row(&[0, 0, 0]), &[1]), Err(Error::NoBoundary(_))));
        assert!(matches!(signed_distance_map(&row(&[1, 1]), &[1]), Err(Error::NoBoundary(_))));
        assert!(matches!(sdm_bruteforce_oracle(&row(&[0, 0]), &[1]), Err(Error::NoBoundary(_))));
        let big = LabelVolume::background(Grid::unit([25, 24, 24]), 2);
        assert!(matches!(sdm_bruteforce_oracle(&big, &[1]), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn union_of_classes() {
        let lab = LabelVolume::new(Grid::unit([1, 1, 5]), vec![0, 1, 2, 0, 0], 3).unwrap();
        let s = signed_distance_map(&lab, &[1, 2]).unwrap();
        assert_eq!(s.data, vec![1.0, 0.0, 0.0, 1.0, 2.0]);
        assert_eq!(s.source, SdmSource::ForegroundUnion(vec![1, 2]));
    }

    #[test]
    fn envelope_matches_naive() {
        let f = [f64::INFINITY, 3.0, f64::INFINITY, 0.0, 7.0, f64::INFINITY, 1.0];
        let mut out = vec![0.0; f.len()];
        envelope_1d(&f, 2.0, &mut out, &mut Vec::new(), &mut Vec::new());
        for (q, &got) in out.iter().enumerate() {
            let naive = (0..f.len())
                .filter(|&p| f[p].is_finite())
                .map(|p| f[p] + 2.0 * ((q as f64 - p as f64).powi(2)))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(got, naive);
        }
    }
}
