//! Surface proximity between segmented structures, and sphere/capsule phantoms
//! with analytic answers for checking it.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::anatomy::{self, Structure};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::metrics::{extract_surface, SurfacePointSet};
use crate::numeric::pairwise_sum;
use crate::par;
use crate::volume::{Grid, LabelVolume};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeshMode {
    /// Boundary voxel centres, as used by the evaluation metrics.
    VoxelCenters,
    /// Vertices of the 0.5 level set of the class indicator.
    #[default]
    IsoSurface,
}

/// Surface samples of `class` in mm.
///
/// In iso-surface mode every grid edge whose two voxel centres disagree on
/// class membership contributes its midpoint, with the space outside the
/// volume counted as non-member. This is exactly the vertex set marching
/// cubes produces for a binary field thresholded at 0.5.
pub fn surface_points_mesh(labels: &LabelVolume, class: u16, mode: MeshMode) -> Result<SurfacePointSet> {
    match mode {
        MeshMode::VoxelCenters => extract_surface(labels, class),
        MeshMode::IsoSurface => {
            let g = labels.grid;
            let [d, h, w] = g.dims;
            let per_voxel: Vec<Vec<[f64; 3]>> = par::map_range(g.len(), |i| {
                if labels.data[i] != class {
                    return Vec::new();
                }
                let c = g.coords(i);
                let base = g.position_mm(c[0], c[1], c[2]);
                let mut out = Vec::new();
                for (axis, n) in [d, h, w].into_iter().enumerate() {
                    for step in [-1isize, 1] {
                        let j = c[axis] as isize + step;
                        let outside = j < 0 || j as usize >= n || {
                            let mut cc = c;
                            cc[axis] = j as usize;
                            labels.data[g.index(cc[0], cc[1], cc[2])] != class
                        };
                        if outside {
                            let mut p = base;
                            p[2 - axis] += 0.5 * step as f64 * g.spacing[axis];
                            out.push(p);
                        }
                    }
                }
                out
            });
            let pts: Vec<[f64; 3]> = per_voxel.into_iter().flatten().collect();
            if pts.is_empty() {
                return Err(Error::ClassAbsent(class));
            }
            Ok(SurfacePointSet::from_points(pts, Some(class)))
        }
    }
}

/// One class inside a label volume.
#[derive(Clone, Copy, Debug)]
pub struct Region<'a> {
    pub labels: &'a LabelVolume,
    pub class: u16,
}

/// Signed shortest distance from `a` to `b` in mm.
///
/// Positive values are the minimum surface-to-surface gap. If the two voxel
/// regions overlap the result is negative and its magnitude is the deepest
/// penetration: the largest distance from an overlapping voxel to `b`'s surface.
pub fn proximity_distance(a: &SurfacePointSet, b: &SurfacePointSet, ra: Region<'_>, rb: Region<'_>) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet("proximity needs two nonempty surfaces".into()));
    }
    if ra.labels.grid.dims != rb.labels.grid.dims {
        return shape_err("region volumes differ in shape");
    }
    let g = ra.labels.grid;
    let overlap: Vec<usize> = (0..g.len())
        .filter(|&i| ra.labels.data[i] == ra.class && rb.labels.data[i] == rb.class)
        .collect();
    if !overlap.is_empty() {
        let depth = par::map_slice(&overlap, |&i| {
            let [z, y, x] = g.coords(i);
            b.distance_to(&g.position_mm(z, y, x)).unwrap()
        });
        return Ok(-depth.into_iter().fold(0.0, f64::max));
    }
    Ok(a.directed_distances(b)?.into_iter().fold(f64::INFINITY, f64::min))
}

/// Surfaces plus signed distance between two regions.
pub fn region_distance(ra: Region<'_>, rb: Region<'_>, mode: MeshMode) -> Result<f64> {
    let a = surface_points_mesh(ra.labels, ra.class, mode)?;
    let b = surface_points_mesh(rb.labels, rb.class, mode)?;
    proximity_distance(&a, &b, ra, rb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProximityResult {
    pub tooth_id: u8,
    pub structure: Structure,
    pub structure_class: u16,
    pub d_auto: f64,
    pub d_ref: Option<f64>,
    pub delta_e: Option<f64>,
    /// Contact or protrusion, `d_auto <= 0`.
    pub risk_flag: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProximityReport {
    pub mode: MeshMode,
    pub results: Vec<ProximityResult>,
    /// Requested teeth that were skipped, with the reason.
    pub omitted: Vec<(u8, String)>,
    pub mean_delta_e: Option<f64>,
}

/// Expert reference distances keyed by tooth and structure.
pub type RefTable = BTreeMap<(u8, Structure), f64>;

/// Parses `tooth_id,structure,d_ref_mm` rows; a header line is skipped.
pub fn parse_refs_csv(text: &str) -> Result<RefTable> {
    let mut t = RefTable::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (n == 0 && line.starts_with("tooth")) {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return arg_err(format!("reference line {}: expected 3 fields", n + 1));
        }
        let tooth: u8 = f[0].parse().map_err(|_| Error::InvalidArgument(format!("line {}: bad tooth id", n + 1)))?;
        let d: f64 = f[2].parse().map_err(|_| Error::InvalidArgument(format!("line {}: bad distance", n + 1)))?;
        t.insert((tooth, f[1].parse()?), d);
    }
    Ok(t)
}

/// One result per present tooth against the same-side structure.
///
/// `structures` may hold the structure segmentation separately, which lets
/// overlapping regions be represented; otherwise `labels` is used for both.
pub fn proximity_report(
    labels: &LabelVolume,
    teeth: &[u8],
    structure: Structure,
    structures: Option<&LabelVolume>,
    refs: &RefTable,
    mode: MeshMode,
) -> Result<ProximityReport> {
    let svol = structures.unwrap_or(labels);
    if svol.grid.dims != labels.grid.dims {
        return shape_err("structure volume differs in shape from the tooth labels");
    }
    let mut omitted = Vec::new();
    let mut jobs = Vec::new();
    for &fdi in teeth {
        let class = anatomy::fdi_to_class(fdi).ok_or_else(|| Error::InvalidArgument(format!("{fdi} is not an FDI code")))?;
        if labels.count(class) == 0 {
            omitted.push((fdi, "tooth absent".to_string()));
            continue;
        }
        let sc = anatomy::structure_class(fdi, structure)?;
        if svol.count(sc) == 0 {
            return Err(Error::ClassAbsent(sc));
        }
        jobs.push((fdi, class, sc));
    }
    let results: Vec<Result<ProximityResult>> = par::map_slice(&jobs, |&(fdi, class, sc)| {
        let d_auto = region_distance(Region { labels, class }, Region { labels: svol, class: sc }, mode)?;
        let d_ref = refs.get(&(fdi, structure)).copied();
        Ok(ProximityResult {
            tooth_id: fdi,
            structure,
            structure_class: sc,
            d_auto,
            d_ref,
            delta_e: d_ref.map(|r| (d_auto - r).abs()),
            risk_flag: d_auto <= 0.0,
        })
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let errs: Vec<f64> = results.iter().filter_map(|r| r.delta_e).collect();
    let mean_delta_e = (!errs.is_empty()).then(|| pairwise_sum(&errs) / errs.len() as f64);
    Ok(ProximityReport { mode, results, omitted, mean_delta_e })
}

pub fn report_csv(r: &ProximityReport) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    let mut s = String::from("tooth_id,structure,d_auto_mm,d_ref_mm,delta_e_mm,risk_flag\n");
    for p in &r.results {
        let _ = writeln!(
            s,
            "{},{},{:.4},{},{},{}",
            p.tooth_id,
            p.structure,
            p.d_auto,
            opt(p.d_ref),
            opt(p.delta_e),
            p.risk_flag
        );
    }
    if let Some(m) = r.mean_delta_e {
        let _ = writeln!(s, "mean,,,,{m:.4},");
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Shape {
    /// Centre in mm as `(x, y, z)`.
    Sphere { center: [f64; 3], radius: f64, class: u16 },
    /// Segment `a`-`b` swept by a ball.
    Capsule { a: [f64; 3], b: [f64; 3], radius: f64, class: u16 },
}

impl Shape {
    fn class(&self) -> u16 {
        match self {
            Shape::Sphere { class, .. } | Shape::Capsule { class, .. } => *class,
        }
    }

    fn radius(&self) -> f64 {
        match self {
            Shape::Sphere { radius, .. } | Shape::Capsule { radius, .. } => *radius,
        }
    }

    /// Axis-aligned bounds as `(min, max)` in `(x, y, z)`.
    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let r = self.radius();
        let (a, b) = match self {
            Shape::Sphere { center, .. } => (*center, *center),
            Shape::Capsule { a, b, .. } => (*a, *b),
        };
        ([0, 1, 2].map(|i| a[i].min(b[i]) - r), [0, 1, 2].map(|i| a[i].max(b[i]) + r))
    }

    fn contains(&self, p: &[f64; 3]) -> bool {
        match self {
            Shape::Sphere { center, radius, .. } => crate::kdtree::sq_dist(p, center) <= radius * radius,
            Shape::Capsule { a, b, radius, .. } => {
                let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
                let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
                let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
                let t = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let q = [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
                crate::kdtree::sq_dist(p, &q) <= radius * radius
            }
        }
    }
}

fn default_spacing() -> [f64; 3] {
    [1.0; 3]
}

fn default_classes() -> u16 {
    anatomy::NUM_CLASSES
}

/// Synthetic label volume description. `dims`, `spacing` and `origin` are
/// `(z, y, x)`; shape coordinates are `(x, y, z)` mm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    #[serde(default = "default_spacing")]
    pub spacing: [f64; 3],
    #[serde(default)]
    pub origin: [f64; 3],
    #[serde(default = "default_classes")]
    pub num_classes: u16,
    #[serde(default)]
    pub shapes: Vec<Shape>,
}

impl PhantomSpec {
    pub fn grid(&self) -> Result<Grid> {
        Grid::with_origin(self.dims, self.spacing, self.origin)
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.grid()?;
        let max_s = g.spacing.iter().copied().fold(0.0, f64::max);
        for (i, s) in self.shapes.iter().enumerate() {
            if s.class() >= self.num_classes {
                return arg_err(format!("shape {i}: class {} >= {}", s.class(), self.num_classes));
            }
            if !(s.radius() > 2.0 * max_s) {
                return arg_err(format!("shape {i}: radius {} mm is not above two voxels ({} mm)", s.radius(), 2.0 * max_s));
            }
            let (lo, hi) = s.bounds();
            for a in 0..3 {
                let ax = 2 - a;
                let start = g.origin[ax];
                let end = start + (g.dims[ax] - 1) as f64 * g.spacing[ax];
                if lo[a] < start || hi[a] > end {
                    return arg_err(format!("shape {i} extends outside the volume"));
                }
            }
        }
        Ok(())
    }
}

/// Rasterises the shapes in order; a voxel belongs to a shape when its centre
/// lies inside it, and later shapes overwrite earlier ones.
pub fn make_phantom(spec: &PhantomSpec) -> Result<LabelVolume> {
    spec.validate()?;
    let g = spec.grid()?;
    let [_, h, w] = g.dims;
    let mut data = vec![anatomy::BACKGROUND; g.len()];
    par::for_each_chunk_mut(&mut data, h * w, |z, plane| {
        for y in 0..h {
            for x in 0..w {
                let p = g.position_mm(z, y, x);
                for s in &spec.shapes {
                    if s.contains(&p) {
                        plane[y * w + x] = s.class();
                    }
                }
            }
        }
    });
    LabelVolume::new(g, data, spec.num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(center: [f64; 3], radius: f64, class: u16) -> Shape {
        Shape::Sphere { center, radius, class }
    }

    #[test]
    fn single_voxel_iso_surface() {
        let g = Grid::new([3, 3, 3], [1.0, 2.0, 0.5]).unwrap();
        let mut l = LabelVolume::background(g, 2);
        l.data[g.index(1, 1, 1)] = 1;
        let s = surface_points_mesh(&l, 1, MeshMode::IsoSurface).unwrap();
        let c = g.position_mm(1, 1, 1);
        assert_eq!(s.len(), 6);
        for p in s.points() {
            let off: Vec<f64> = (0..3).map(|i| (p[i] - c[i]).abs()).collect();
            let half = [0.25, 1.0, 0.5];
            assert_eq!(off.iter().filter(|&&o| o == 0.0).count(), 2);
            assert!((0..3).any(|i| off[i] == half[i]));
        }
        assert!(matches!(surface_points_mesh(&l, 0, MeshMode::IsoSurface).unwrap().len(), n if n > 0));
        assert!(surface_points_mesh(&l, 3, MeshMode::IsoSurface).is_err());
    }

    #[test]
    fn phantom_sphere_volume() {
        let spec = PhantomSpec {
            dims: [15, 15, 15],
            spacing: [1.0; 3],
            origin: [0.0; 3],
            num_classes: 2,
            shapes: vec![sphere([7.0, 7.0, 7.0], 5.0, 1)],
        };
        let l = make_phantom(&spec).unwrap();
        let expect = 4.0 / 3.0 * std::f64::consts::PI * 125.0;
        assert!(((l.count(1) as f64) - expect).abs() / expect < 0.02);
        let empty = PhantomSpec { shapes: vec![], ..spec.clone() };
        assert_eq!(make_phantom(&empty).unwrap().count(0), 15usize.pow(3));
        let bad = PhantomSpec { shapes: vec![sphere([2.0, 7.0, 7.0], 5.0, 1)], ..spec.clone() };
        assert!(make_phantom(&bad).is_err());
        let tiny = PhantomSpec { shapes: vec![sphere([7.0, 7.0, 7.0], 2.0, 1)], ..spec };
        assert!(make_phantom(&tiny).is_err());
    }

    #[test]
    fn sphere_gap_and_overlap() {
        let mk = |cx: f64, r: f64, class: u16| {
            make_phantom(&PhantomSpec {
                dims: [31, 31, 61],
                spacing: [0.5; 3],
                origin: [0.0; 3],
                num_classes: 3,
                shapes: vec![sphere([cx, 7.5, 7.5], r, class)],
            })
            .unwrap()
        };
        let diag = 0.5 * 3f64.sqrt();
        let a = mk(8.0, 5.0, 1);
        let b = mk(20.0, 3.0, 2);
        let d = region_distance(Region { labels: &a, class: 1 }, Region { labels: &b, class: 2 }, MeshMode::IsoSurface).unwrap();
        assert!((d - 4.0).abs() <= diag, "{d}");
        let back = region_distance(Region { labels: &b, class: 2 }, Region { labels: &a, class: 1 }, MeshMode::IsoSurface).unwrap();
        assert!((d - back).abs() < 1e-9);
        let c = mk(14.0, 3.0, 2);
        let d = region_distance(Region { labels: &a, class: 1 }, Region { labels: &c, class: 2 }, MeshMode::IsoSurface).unwrap();
        assert!(d < 0.0 && (d + 2.0).abs() <= diag, "{d}");
    }

    #[test]
    fn report_omits_absent_teeth() {
        let t16 = anatomy::fdi_to_class(16).unwrap();
        let spec = PhantomSpec {
            dims: [20, 20, 40],
            spacing: [0.5; 3],
            origin: [0.0; 3],
            num_classes: anatomy::NUM_CLASSES,
            shapes: vec![sphere([5.0, 5.0, 5.0], 3.0, t16), sphere([13.0, 5.0, 5.0], 3.0, anatomy::SINUS_RIGHT)],
        };
        let l = make_phantom(&spec).unwrap();
        let refs = parse_refs_csv("tooth_id,structure,d_ref_mm\n16,sinus,2.0\n").unwrap();
        let r = proximity_report(&l, &[15, 16], Structure::Sinus, None, &refs, MeshMode::IsoSurface).unwrap();
        assert_eq!(r.omitted, vec![(15, "tooth absent".to_string())]);
        assert_eq!(r.results.len(), 1);
        assert!(r.mean_delta_e.unwrap() <= 0.5 * 3f64.sqrt());
        assert!(!r.results[0].risk_flag);
        assert!(report_csv(&r).starts_with("tooth_id,structure"));
    }
}
