//! Invariants checked over random inputs.

use proptest::prelude::*;

use voxgeo_core::anatomy::{class_to_fdi, fdi_to_class, structure_class, Structure};
use voxgeo_core::clinical::{region_distance, MeshMode, Region};
use voxgeo_core::kdtree::KdTree;
use voxgeo_core::metrics::{assd, hd95, SurfacePointSet};
use voxgeo_core::preprocess::{extract_label_patch, zscore_normalize, Padding, PatchSpec};
use voxgeo_core::sdm::{lipschitz_excess, sdm_bruteforce_oracle, signed_distance_map};
use voxgeo_core::stitch::{plan_windows, stitch, window_of, WeightMode, WeightWindow};
use voxgeo_core::uncertainty::{ambiguity, ambiguity_field, gating_mask};
use voxgeo_core::{oracle, Grid, LabelVolume, ProbVolume, Volume};

fn dims_strategy(max: usize) -> impl Strategy<Value = [usize; 3]> {
    [1..=max, 1..=max, 1..=max]
}

fn labels_strategy(max: usize, classes: u16) -> impl Strategy<Value = LabelVolume> {
    (dims_strategy(max), prop::sample::select(vec![0.5, 1.0, 2.5])).prop_flat_map(move |(dims, s)| {
        let n: usize = dims.iter().product();
        prop::collection::vec(0..classes, n).prop_map(move |data| {
            LabelVolume::new(Grid::new(dims, [s, 1.0, s * 0.5 + 0.25]).unwrap(), data, classes).unwrap()
        })
    })
}

fn points_strategy(max: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec([-20.0..20.0f64, -20.0..20.0f64, -20.0..20.0f64], 1..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ambiguity_is_symmetric_and_peaks_at_half(p in 0.0..=1.0f64) {
        prop_assert!((ambiguity(p) - ambiguity(1.0 - p)).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&ambiguity(p)));
        prop_assert!(ambiguity(p) <= ambiguity(0.5));
    }

    #[test]
    fn gating_masks_shrink_as_tau_rises(data in prop::collection::vec(0.0..=1.0f32, 64), t1 in 0.0..=1.0f64, t2 in 0.0..=1.0f64) {
        let p = ProbVolume::single(Grid::unit([4, 4, 4]), data).unwrap();
        let a = ambiguity_field(&p).unwrap();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(gating_mask(&a, hi).unwrap().is_subset_of(&gating_mask(&a, lo).unwrap()));
    }

    #[test]
    fn sdm_matches_oracle_and_is_lipschitz(l in labels_strategy(7, 3)) {
        prop_assume!(l.data.contains(&1) && l.data.iter().any(|&v| v != 1));
        let fast = signed_distance_map(&l, &[1]).unwrap();
        let slow = sdm_bruteforce_oracle(&l, &[1]).unwrap();
        prop_assert_eq!(&fast.squared, &slow.squared);
        prop_assert!(lipschitz_excess(&fast) <= 1e-9);
        for (i, &v) in l.data.iter().enumerate() {
            prop_assert_eq!(fast.squared[i] <= 0.0, v == 1);
        }
    }

    #[test]
    fn kdtree_nearest_matches_brute_force(pts in points_strategy(80), qs in points_strategy(20)) {
        let tree = KdTree::build(pts.clone());
        for q in &qs {
            let brute = pts.iter().map(|p| voxgeo_core::kdtree::sq_dist(p, q)).fold(f64::INFINITY, f64::min).sqrt();
            prop_assert_eq!(tree.nearest_distance(q).unwrap(), brute);
        }
    }

    #[test]
    fn surface_metrics_match_oracle(a in points_strategy(60), b in points_strategy(60)) {
        let (sa, sb) = (SurfacePointSet::from_points(a, None), SurfacePointSet::from_points(b, None));
        prop_assert_eq!(hd95(&sa, &sb).unwrap(), oracle::hd95(sa.points(), sb.points()));
        let want = oracle::assd(sa.points(), sb.points());
        prop_assert!((assd(&sa, &sb).unwrap() - want).abs() <= 1e-12 * want.max(1.0));
        prop_assert_eq!(hd95(&sa, &sb).unwrap(), hd95(&sb, &sa).unwrap());
        prop_assert_eq!(hd95(&sa, &sa).unwrap(), 0.0);
    }

    #[test]
    fn zscore_inverts(data in prop::collection::vec(-1000.0..1000.0f32, 27), mean in -100.0..100.0f64, std in 0.1..50.0f64) {
        let v = Volume::from_vec(Grid::unit([3, 3, 3]), data.clone()).unwrap();
        let z = zscore_normalize(&v, mean, std).unwrap();
        for (orig, n) in data.iter().zip(&z.data) {
            let back = *n as f64 * std + mean;
            prop_assert!((back - *orig as f64).abs() <= 1e-3 * (1.0 + orig.abs() as f64));
        }
    }

    #[test]
    fn plans_cover_every_voxel(dims in dims_strategy(40), w in [1usize..=16, 1usize..=16, 1usize..=16], overlap in 0.0..0.9f64) {
        let window = [w[0].min(dims[0]), w[1].min(dims[1]), w[2].min(dims[2])];
        let plan = plan_windows(dims, window, overlap, false).unwrap();
        prop_assert!(plan.coverage().iter().all(|&c| c > 0));
        for o in &plan.origins {
            for a in 0..3 {
                prop_assert!(o[a] + window[a] <= dims[a]);
            }
        }
    }

    #[test]
    fn zero_offset_patch_is_a_crop(l in labels_strategy(8, 4), pad in prop::sample::select(vec![Padding::Zero, Padding::Mirror])) {
        let d = l.dims();
        let size = [d[0].div_ceil(2), d[1], d[2].div_ceil(2)];
        let p = extract_label_patch(&l, &PatchSpec::at(size, [0, 0, 0]), pad).unwrap();
        for z in 0..size[0] {
            for y in 0..size[1] {
                for x in 0..size[2] {
                    prop_assert_eq!(p.get(z, y, x), l.get(z, y, x));
                }
            }
        }
    }

    #[test]
    fn stitching_a_pointwise_field_is_exact(seed in 0u64..1000, mode in prop::sample::select(vec![WeightMode::Uniform, WeightMode::Gaussian])) {
        let dims = [10, 9, 11];
        let g = Grid::unit(dims);
        let n = g.len();
        let data: Vec<f32> = (0..2 * n).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f32 / 1000.0).collect();
        let whole = ProbVolume::new(g, 2, data).unwrap();
        let plan = plan_windows(dims, [6, 5, 6], 0.5, false).unwrap();
        let mut patches: Vec<_> = plan.origins.iter().map(|&o| (o, window_of(&whole, o, plan.window))).collect();
        let a = stitch(&patches, &plan, &WeightWindow::new(mode, plan.window), g).unwrap();
        patches.reverse();
        let b = stitch(&patches, &plan, &WeightWindow::new(mode, plan.window), g).unwrap();
        prop_assert_eq!(&a.data, &b.data);
        let err = a.data.iter().zip(&whole.data).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        prop_assert!(err <= 1e-6);
    }

    #[test]
    fn proximity_is_symmetric(dx in 2usize..10, r in 2usize..4) {
        let dims = [8, 8, 24];
        let g = Grid::unit(dims);
        let data: Vec<u16> = (0..g.len()).map(|i| {
            let [z, y, x] = g.coords(i);
            let inside = |cx: usize| z.abs_diff(4) <= r && y.abs_diff(4) <= r && x.abs_diff(cx) <= r;
            if inside(5) { 1 } else if inside(5 + 2 * r + dx) { 2 } else { 0 }
        }).collect();
        let l = LabelVolume::new(g, data, 3).unwrap();
        for mode in [MeshMode::IsoSurface, MeshMode::VoxelCenters] {
            let ab = region_distance(Region { labels: &l, class: 1 }, Region { labels: &l, class: 2 }, mode).unwrap();
            let ba = region_distance(Region { labels: &l, class: 2 }, Region { labels: &l, class: 1 }, mode).unwrap();
            prop_assert!(ab > 0.0);
            prop_assert_eq!(ab, ba);
        }
    }

    #[test]
    fn fdi_mapping_round_trips(q in 1u8..=4, t in 1u8..=8) {
        let fdi = q * 10 + t;
        let c = fdi_to_class(fdi).unwrap();
        prop_assert!((1..=32).contains(&c));
        prop_assert_eq!(class_to_fdi(c), Some(fdi));
        prop_assert_eq!(structure_class(fdi, Structure::Sinus).is_ok(), q <= 2);
        prop_assert_eq!(structure_class(fdi, Structure::Iac).is_ok(), q >= 3);
    }
}
