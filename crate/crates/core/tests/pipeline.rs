//! End-to-end flows across modules, driven through files where the CLI would be.

use voxgeo_core::clinical::{make_phantom, region_distance, MeshMode, PhantomSpec, Region, Shape};
use voxgeo_core::conv::Conv3dParams;
use voxgeo_core::io::{self, AnyVolume};
use voxgeo_core::metrics::{aggregate_cases, evaluate};
use voxgeo_core::params::WeightsBundle;
use voxgeo_core::preprocess::resample_trilinear;
use voxgeo_core::sdm::signed_distance_map;
use voxgeo_core::stitch::{argmax_labels, compose_stage2_input, plan_windows, stitch, window_of, WeightWindow};
use voxgeo_core::uncertainty::{agbr_forward, ambiguity_field, foreground_prob, gating_mask, RefinerParams, DEFAULT_TAU};
use voxgeo_core::attention::{sdmaa_forward, AdapterParams, ChannelAttentionParams, AWP_EPS};
use voxgeo_core::{Error, Grid, LabelVolume, ProbVolume, Volume};

fn two_sphere_spec(spacing: f64, gap: f64) -> PhantomSpec {
    let r = 3.0;
    let extent = 4.0 * r + gap + 4.0;
    let n = (extent / spacing).ceil() as usize + 1;
    let m = ((2.0 * r + 4.0) / spacing).ceil() as usize + 1;
    let c = (m - 1) as f64 * spacing / 2.0;
    PhantomSpec {
        dims: [m, m, n],
        spacing: [spacing; 3],
        origin: [0.0; 3],
        num_classes: 3,
        shapes: vec![
            Shape::Sphere { center: [2.0 + r, c, c], radius: r, class: 1 },
            Shape::Sphere { center: [2.0 + 3.0 * r + gap, c, c], radius: r, class: 2 },
        ],
    }
}

#[test]
fn phantom_gap_error_shrinks_with_spacing() {
    let gap = 2.3;
    let err = |s: f64| {
        let l = make_phantom(&two_sphere_spec(s, gap)).unwrap();
        let d = region_distance(Region { labels: &l, class: 1 }, Region { labels: &l, class: 2 }, MeshMode::IsoSurface).unwrap();
        (d - gap).abs()
    };
    let (coarse, fine) = (err(0.5), err(0.2));
    assert!(coarse <= 3f64.sqrt() * 0.5, "{coarse}");
    assert!(fine <= 0.35, "{fine}");
}

#[test]
fn io_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("zeros.raw");
    std::fs::write(&raw, vec![0u8; 27 * 4]).unwrap();
    std::fs::write(
        dir.path().join("zeros.json"),
        r#"{"dims": [3, 3, 3], "spacing": [0.2, 0.2, 0.2], "dtype": "float32", "kind": "scalar"}"#,
    )
    .unwrap();
    let v = io::read_scalar(&raw).unwrap();
    assert_eq!(v.grid.spacing, [0.2; 3]);
    assert!(v.data.iter().all(|&x| x == 0.0));

    let nii = dir.path().join("v.nii");
    io::write_volume(&v.clone().into(), &nii).unwrap();
    let mut bytes = std::fs::read(&nii).unwrap();
    bytes[344] = b'x';
    std::fs::write(&nii, bytes).unwrap();
    assert!(matches!(io::read_scalar(&nii), Err(Error::MalformedHeader(_))));
}

#[test]
fn two_stage_flow_runs_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let dims = [16, 16, 16];
    let g = Grid::new(dims, [0.5; 3]).unwrap();
    let n = g.len();

    // Stage 1: stitched arch probabilities from a pointwise model.
    let up: Vec<f32> = (0..n).map(|i| if g.coords(i)[0] < 8 { 0.9 } else { 0.2 }).collect();
    let low: Vec<f32> = (0..n).map(|i| if g.coords(i)[0] >= 8 { 0.7 } else { 0.1 }).collect();
    let two = |p: &[f32]| {
        let mut d: Vec<f32> = p.iter().map(|v| 1.0 - v).collect();
        d.extend_from_slice(p);
        ProbVolume::new(g, 2, d).unwrap()
    };
    let (p_up, p_low) = (two(&up), two(&low));
    let plan = plan_windows(dims, [8, 8, 8], 0.5, false).unwrap();
    let w = WeightWindow::gaussian(plan.window);
    let patches: Vec<_> = plan.origins.iter().map(|&o| (o, window_of(&p_up, o, plan.window))).collect();
    let stitched = stitch(&patches, &plan, &w, g).unwrap();
    let err = stitched.data.iter().zip(&p_up.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(err < 1e-6);

    // Stage 2 input, written and read back.
    let image = Volume::from_vec(g, (0..n).map(|i| (i % 13) as f32).collect()).unwrap();
    let adapter = Conv3dParams::zeros(4, 4, 1);
    let x = compose_stage2_input(&image, &p_up, &p_low, &adapter).unwrap();
    let fpath = dir.path().join("x.raw");
    io::write_feature_map(&x, &fpath).unwrap();
    let x = io::read_feature_map(&fpath).unwrap();

    // Shape prior from the stage-1 argmax, at half resolution.
    let single = |p: &[f32]| ProbVolume::single(g, p.to_vec()).unwrap();
    let fg = foreground_prob(&single(&up), &single(&low)).unwrap();
    let labels = argmax_labels(&stitched).unwrap();
    let sdm = signed_distance_map(&labels, &[1]).unwrap();
    let prior = resample_trilinear(&sdm.to_scalar(), x.dims).unwrap();

    let mut bundle = WeightsBundle::default();
    bundle.put_adapter(&AdapterParams::with_conv(Conv3dParams::identity(1, 1))).unwrap();
    bundle.put_channel_attention(&ChannelAttentionParams::zeros(x.channels, 2)).unwrap();
    bundle.put_refiner(&RefinerParams::zeros(x.channels, 2)).unwrap();
    let wpath = dir.path().join("w.json");
    bundle.write(&wpath).unwrap();
    let bundle = WeightsBundle::read(&wpath).unwrap();
    let y = sdmaa_forward(&x, &prior, &bundle.adapter().unwrap(), &bundle.channel_attention().unwrap(), AWP_EPS).unwrap();
    for (a, b) in y.data.iter().zip(&x.data) {
        assert_eq!(*a, b * 0.5);
    }

    // Gated refinement with alpha = 0 is an exact no-op.
    let a = ambiguity_field(&fg).unwrap();
    let m = gating_mask(&a, DEFAULT_TAU).unwrap();
    let out = agbr_forward(&y, &m, &bundle.refiner().unwrap()).unwrap();
    assert_eq!(out.data, y.data);
}

#[test]
fn metrics_over_saved_cases() {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for gap in [1.0, 2.0] {
        let l = make_phantom(&two_sphere_spec(0.5, gap)).unwrap();
        let p = dir.path().join(format!("c{gap}.nii"));
        io::write_volume(&l.into(), &p).unwrap();
        let AnyVolume::Label(back) = io::read_volume(&p, io::VolumeKind::Label).unwrap() else { panic!() };
        let shifted = LabelVolume::new(back.grid, back.data.iter().map(|&v| if v == 2 { 0 } else { v }).collect(), 3).unwrap();
        reports.push(evaluate(&shifted, &back, &[1, 2]).unwrap());
    }
    let agg = aggregate_cases(&reports);
    for r in &reports {
        assert_eq!(r.per_class[0].dsc, 1.0);
        assert_eq!(r.per_class[1].dsc, 0.0);
        assert!(r.per_class[1].empty_pred);
        assert_eq!(r.mean_dsc, Some(0.5));
    }
    assert_eq!(agg.case_mean_dsc, Some(0.5));
    assert_eq!(agg.pooled_mean_dsc, Some(0.5));
}
