//! Region overlap and surface distance metrics.
//!
//! Surfaces are the centres (in mm) of class voxels that have at least one
//! 6-neighbour of a different class; the volume border counts as different.
//! Nearest-neighbour distances come from an exact k-d tree.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::kdtree::KdTree;
use crate::numeric::pairwise_sum;
use crate::par;
use crate::volume::LabelVolume;

/// Deduplicated surface points with their spatial index.
#[derive(Clone, Debug)]
pub struct SurfacePointSet {
    tree: KdTree,
    pub source: Option<u16>,
}

impl SurfacePointSet {
    pub fn from_points(mut points: Vec<[f64; 3]>, source: Option<u16>) -> Self {
        points.sort_by(|a, b| {
            a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])).then(a[2].total_cmp(&b[2]))
        });
        points.dedup();
        Self { tree: KdTree::build(points), source }
    }

    pub fn points(&self) -> &[[f64; 3]] {
        self.tree.points()
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn index(&self) -> &KdTree {
        &self.tree
    }

    /// Distance from `q` to the closest point of the set.
    pub fn distance_to(&self, q: &[f64; 3]) -> Option<f64> {
        self.tree.nearest_distance(q)
    }

    /// Nearest distance from every point of `self` to `other`.
    pub fn directed_distances(&self, other: &SurfacePointSet) -> Result<Vec<f64>> {
        if self.is_empty() || other.is_empty() {
            return Err(Error::EmptySet("directed distance needs two nonempty sets".into()));
        }
        Ok(par::map_slice(self.points(), |p| other.tree.nearest_distance(p).unwrap()))
    }
}

/// Boundary voxel centres of `class`.
pub fn extract_surface(labels: &LabelVolume, class: u16) -> Result<SurfacePointSet> {
    let g = labels.grid;
    let pts: Vec<Option<[f64; 3]>> = par::map_range(g.len(), |i| {
        if labels.data[i] != class {
            return None;
        }
        let [z, y, x] = g.coords(i);
        let exposed = g.neighbors6(z, y, x).any(|n| match n {
            None => true,
            Some(j) => labels.data[j] != class,
        });
        exposed.then(|| g.position_mm(z, y, x))
    });
    let pts: Vec<[f64; 3]> = pts.into_iter().flatten().collect();
    if pts.is_empty() {
        return Err(Error::ClassAbsent(class));
    }
    Ok(SurfacePointSet::from_points(pts, Some(class)))
}

/// Nearest-rank percentile of an ascending slice: element `ceil(q n / 100) - 1`.
pub fn nearest_rank(sorted: &[f64], q: usize) -> f64 {
    let n = sorted.len();
    let rank = (q * n).div_ceil(100).max(1);
    sorted[rank - 1]
}

fn h95(a: &SurfacePointSet, b: &SurfacePointSet) -> Result<f64> {
    let mut d = a.directed_distances(b)?;
    d.sort_by(f64::total_cmp);
    Ok(nearest_rank(&d, 95))
}

/// Symmetric 95th-percentile Hausdorff distance.
pub fn hd95(a: &SurfacePointSet, b: &SurfacePointSet) -> Result<f64> {
    Ok(h95(a, b)?.max(h95(b, a)?))
}

/// Average symmetric surface distance.
pub fn assd(a: &SurfacePointSet, b: &SurfacePointSet) -> Result<f64> {
    let ab = a.directed_distances(b)?;
    let ba = b.directed_distances(a)?;
    Ok((pairwise_sum(&ab) + pairwise_sum(&ba)) / (ab.len() + ba.len()) as f64)
}

/// Voxel-count overlap of one class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionScores {
    pub dsc: f64,
    /// Undefined when the ground truth is empty.
    pub sen: Option<f64>,
    pub pred_count: usize,
    pub gt_count: usize,
    pub intersection: usize,
}

pub fn dsc_sen(pred: &LabelVolume, gt: &LabelVolume, class: u16) -> Result<RegionScores> {
    if pred.grid.dims != gt.grid.dims {
        return shape_err(format!("prediction {:?} vs ground truth {:?}", pred.grid.dims, gt.grid.dims));
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    let dsc = if p + g == 0 { 1.0 } else { 2.0 * both as f64 / (p + g) as f64 };
    let sen = (g > 0).then(|| both as f64 / g as f64);
    Ok(RegionScores { dsc, sen, pred_count: p, gt_count: g, intersection: both })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: u16,
    pub dsc: f64,
    pub sen: Option<f64>,
    pub hd95_mm: Option<f64>,
    pub assd_mm: Option<f64>,
    pub empty_pred: bool,
    pub empty_gt: bool,
}

impl ClassMetrics {
    pub fn flags(&self) -> String {
        let mut f = Vec::new();
        if self.empty_pred {
            f.push("empty_pred");
        }
        if self.empty_gt {
            f.push("empty_gt");
        }
        f.join("|")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: Vec<ClassMetrics>,
    /// Macro means over classes present in the ground truth. Surface means
    /// additionally skip classes whose prediction is empty.
    pub mean_dsc: Option<f64>,
    pub mean_sen: Option<f64>,
    pub mean_hd95_mm: Option<f64>,
    pub mean_assd_mm: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-class metrics plus macro means.
pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume, classes: &[u16]) -> Result<MetricReport> {
    if pred.grid.dims != gt.grid.dims || pred.grid.spacing != gt.grid.spacing {
        return shape_err("prediction and ground truth grids differ");
    }
    let mut per_class = Vec::with_capacity(classes.len());
    for &c in classes {
        let r = dsc_sen(pred, gt, c)?;
        let empty_pred = r.pred_count == 0;
        let empty_gt = r.gt_count == 0;
        let (hd, asd) = if !empty_pred && !empty_gt {
            let sp = extract_surface(pred, c)?;
            let sg = extract_surface(gt, c)?;
            (Some(hd95(&sp, &sg)?), Some(assd(&sp, &sg)?))
        } else {
            (None, None)
        };
        per_class.push(ClassMetrics { class: c, dsc: r.dsc, sen: r.sen, hd95_mm: hd, assd_mm: asd, empty_pred, empty_gt });
    }
    let present = || per_class.iter().filter(|m| !m.empty_gt);
    Ok(MetricReport {
        mean_dsc: mean(present().map(|m| m.dsc)),
        mean_sen: mean(present().filter_map(|m| m.sen)),
        mean_hd95_mm: mean(present().filter_map(|m| m.hd95_mm)),
        mean_assd_mm: mean(present().filter_map(|m| m.assd_mm)),
        per_class,
    })
}

/// Aggregation of several per-case reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseAggregate {
    /// Mean of the per-case macro means.
    pub case_mean_dsc: Option<f64>,
    pub case_mean_hd95_mm: Option<f64>,
    /// Mean over every defined (case, class) pair.
    pub pooled_mean_dsc: Option<f64>,
    pub pooled_mean_hd95_mm: Option<f64>,
}

pub fn aggregate_cases(reports: &[MetricReport]) -> CaseAggregate {
    let pooled = || reports.iter().flat_map(|r| r.per_class.iter().filter(|m| !m.empty_gt));
    CaseAggregate {
        case_mean_dsc: mean(reports.iter().filter_map(|r| r.mean_dsc)),
        case_mean_hd95_mm: mean(reports.iter().filter_map(|r| r.mean_hd95_mm)),
        pooled_mean_dsc: mean(pooled().map(|m| m.dsc)),
        pooled_mean_hd95_mm: mean(pooled().filter_map(|m| m.hd95_mm)),
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// CSV with columns `class,dsc,sen,hd95_mm,assd_mm,flags` and a final `mean` row.
pub fn report_csv(report: &MetricReport) -> String {
    let mut s = String::from("class,dsc,sen,hd95_mm,assd_mm,flags\n");
    for m in &report.per_class {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            m.class,
            cell(Some(m.dsc)),
            cell(m.sen),
            cell(m.hd95_mm),
            cell(m.assd_mm),
            m.flags()
        );
    }
    let _ = writeln!(
        s,
        "mean,{},{},{},{},",
        cell(report.mean_dsc),
        cell(report.mean_sen),
        cell(report.mean_hd95_mm),
        cell(report.mean_assd_mm)
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    fn labels(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> u16) -> LabelVolume {
        let g = Grid::unit(dims);
        let data = (0..g.len()).map(|i| { let [z, y, x] = g.coords(i); f(z, y, x) }).collect();
        LabelVolume::from_labels(g, data).unwrap()
    }

    #[test]
    fn region_scores() {
        let a = labels([1, 1, 4], |_, _, x| (x < 2) as u16);
        assert_eq!(dsc_sen(&a, &a, 1).unwrap().dsc, 1.0);
        let b = labels([1, 1, 4], |_, _, x| (x >= 2) as u16);
        let r = dsc_sen(&a, &b, 1).unwrap();
        assert_eq!((r.dsc, r.sen), (0.0, Some(0.0)));
        let c = labels([1, 1, 4], |_, _, x| (x == 1 || x == 2) as u16);
        let r = dsc_sen(&a, &c, 1).unwrap();
        assert_eq!((r.dsc, r.sen), (0.5, Some(0.5)));
        let e = labels([1, 1, 4], |_, _, _| 0);
        let r = dsc_sen(&e, &e, 1).unwrap();
        assert_eq!((r.dsc, r.sen), (1.0, None));
    }

    #[test]
    fn surface_counts() {
        let one = labels([3, 3, 3], |z, y, x| (z == 1 && y == 1 && x == 1) as u16);
        let s = extract_surface(&one, 1).unwrap();
        assert_eq!(s.points(), &[[1.0, 1.0, 1.0]]);
        let cube = labels([5, 5, 5], |z, y, x| ((1..4).contains(&z) && (1..4).contains(&y) && (1..4).contains(&x)) as u16);
        assert_eq!(extract_surface(&cube, 1).unwrap().len(), 26);
        let full = labels([4, 4, 4], |_, _, _| 0);
        assert_eq!(extract_surface(&full, 0).unwrap().len(), 64 - 8);
        assert!(matches!(extract_surface(&full, 1), Err(Error::ClassAbsent(1))));
    }

    #[test]
    fn surface_distance_basics() {
        let a = SurfacePointSet::from_points(vec![[0.0, 0.0, 0.0]], None);
        let b = SurfacePointSet::from_points(vec![[3.0, 0.0, 0.0]], None);
        assert_eq!(hd95(&a, &b).unwrap(), 3.0);
        assert_eq!(assd(&a, &b).unwrap(), 3.0);
        assert_eq!(hd95(&a, &a).unwrap(), 0.0);
        let empty = SurfacePointSet::from_points(vec![], None);
        assert!(hd95(&a, &empty).is_err());
        assert!(assd(&empty, &a).is_err());
    }

    #[test]
    fn nearest_rank_index() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 95), 19.0);
        assert_eq!(nearest_rank(&[5.0], 95), 5.0);
        let v: Vec<f64> = (1..=21).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 95), 20.0);
    }

    #[test]
    fn evaluate_flags_missing_prediction() {
        let gt = labels([4, 4, 4], |z, _, x| if z < 2 { 1 } else if x == 0 { 2 } else { 0 });
        let pred = labels([4, 4, 4], |z, _, _| (z < 2) as u16);
        let r = evaluate(&pred, &gt, &[1, 2]).unwrap();
        assert_eq!(r.per_class[0].hd95_mm, Some(0.0));
        assert!(r.per_class[1].empty_pred);
        assert_eq!(r.per_class[1].hd95_mm, None);
        assert_eq!(r.mean_hd95_mm, Some(0.0));
        assert_eq!(r.mean_dsc, Some(0.5));
        let csv = report_csv(&r);
        assert!(csv.lines().nth(2).unwrap().ends_with("empty_pred"));
    }
}
