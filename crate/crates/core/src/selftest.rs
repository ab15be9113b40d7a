//! Embedded oracle suite. Each check builds its own random or analytic
//! fixtures, compares the fast kernels against an independent reference and
//! reports pass/fail with the worst observed discrepancy.

use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    anatomical_weighted_pooling, awp_grad, global_average_pooling, sdmaa_forward_traced, AdapterParams,
    ChannelAttentionParams, SpatialAttentionMap, AWP_EPS,
};
use crate::clinical::{make_phantom, region_distance, MeshMode, PhantomSpec, Region, Shape};
use crate::conv::Conv3dParams;
use crate::error::{Error, Result};
use crate::gradcheck::check_gradient;
use crate::io;
use crate::losses::{cross_entropy, deep_supervision_loss, soft_dice, LossConfig};
use crate::metrics::{assd, dsc_sen, extract_surface, hd95, SurfacePointSet};
use crate::oracle;
use crate::sdm::{lipschitz_excess, sdm_bruteforce_oracle, signed_distance_map};
use crate::stitch::{plan_windows, stitch, window_of, WeightWindow};
use crate::uncertainty::{active_band, ambiguity, ambiguity_field, gated_fusion, gated_fusion_grad, gating_mask, DEFAULT_TAU};
use crate::volume::{FeatureMap, Grid, LabelVolume, ProbVolume, ScalarVolume, Volume};

/// Outcome of one acceptance check.
#[derive(Clone, Debug, PartialEq)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "criterion {:>2} {} {}: {} ({:.2} s)",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

type Check = fn() -> Result<(bool, String)>;

const CHECKS: [(u8, &str, Check); 9] = [
    (1, "sdm-exactness", sdm_exactness),
    (2, "gating-band", gating_band),
    (3, "gradient-checks", gradient_checks),
    (4, "awp-gap-reduction", awp_gap_reduction),
    (5, "losses", losses),
    (6, "metrics-oracle", metrics_oracle),
    (7, "stitch-commutation", stitch_commutation),
    (8, "clinical-phantom", clinical_phantom),
    (9, "io-roundtrip", io_roundtrip),
];

/// Ids of the checks in this suite.
pub fn criterion_ids() -> Vec<u8> {
    CHECKS.iter().map(|c| c.0).collect()
}

/// Runs one check; errors inside it count as a failure.
pub fn run_criterion(id: u8) -> Option<CriterionResult> {
    let &(id, name, f) = CHECKS.iter().find(|c| c.0 == id)?;
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    Some(CriterionResult { id, name, passed, detail, seconds: t.elapsed().as_secs_f64() })
}

pub fn run_all() -> Vec<CriterionResult> {
    criterion_ids().into_iter().filter_map(run_criterion).collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_labels(r: &mut ChaCha8Rng, grid: Grid, classes: u16, density: f64) -> LabelVolume {
    let data = (0..grid.len())
        .map(|_| if r.random_bool(density) { r.random_range(1..classes) } else { 0 })
        .collect();
    LabelVolume::new(grid, data, classes).unwrap()
}

/// Random channel-normalised probabilities with every entry at least `floor / C`.
fn random_probs(r: &mut ChaCha8Rng, grid: Grid, c: usize, floor: f64) -> ProbVolume<f64> {
    let n = grid.len();
    let mut data = vec![0.0; c * n];
    for v in 0..n {
        let raw: Vec<f64> = (0..c).map(|_| floor + r.random::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        for k in 0..c {
            data[k * n + v] = raw[k] / s;
        }
    }
    ProbVolume::new(grid, c, data).unwrap()
}

fn sdm_exactness() -> Result<(bool, String)> {
    let mut r = rng(1);
    let spacings = [0.5, 1.0, 2.0, 3.0];
    let (mut mismatched, mut worst_lip, mut done) = (0usize, f64::NEG_INFINITY, 0);
    while done < 100 {
        let dims = [0; 3].map(|_| r.random_range(1..=16usize));
        let spacing = [0; 3].map(|_| spacings[r.random_range(0..spacings.len())]);
        let density = r.random_range(0.05..0.7);
        let labels = random_labels(&mut r, Grid::new(dims, spacing)?, 3, density);
        let target = if r.random_bool(0.5) { vec![1] } else { vec![1, 2] };
        let fast = match signed_distance_map(&labels, &target) {
            Ok(s) => s,
            Err(Error::NoBoundary(_)) => continue,
            Err(e) => return Err(e),
        };
        let slow = sdm_bruteforce_oracle(&labels, &target)?;
        mismatched += fast.squared.iter().zip(&slow.squared).filter(|(a, b)| a != b).count();
        worst_lip = worst_lip.max(lipschitz_excess(&fast));
        done += 1;
    }
    let ok = mismatched == 0 && worst_lip <= 1e-9;
    Ok((ok, format!("100 volumes, {mismatched} squared-distance mismatches, worst Lipschitz excess {worst_lip:.2e} mm")))
}

fn gating_band() -> Result<(bool, String)> {
    let (lo, hi) = active_band(DEFAULT_TAU)?;
    let mut ok = (lo - 0.3882).abs() <= 1e-4 && (hi - 0.6118).abs() <= 1e-4;
    // Dense probability sweep against the solved band.
    let n = 100_001;
    let ps: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let grid = Grid::unit([1, 1, n]);
    let field = ambiguity_field(&ProbVolume::single(grid, ps.clone())?)?;
    let mask = gating_mask(&field, DEFAULT_TAU)?;
    let disagree = ps
        .iter()
        .zip(&mask.data)
        .filter(|&(&p, &m)| (p - lo).abs() > 1e-6 && (p - hi).abs() > 1e-6 && (lo < p && p < hi) != m)
        .count();
    ok &= disagree == 0;
    // Nested masks across the threshold sweep.
    let taus = [0.0, 0.5, 0.8, 0.9, 0.95, 0.99];
    let mut r = rng(2);
    let g = Grid::unit([16, 16, 16]);
    let mut nested = true;
    let mut counts = Vec::new();
    for trial in 0..5 {
        let p: Vec<f64> = (0..g.len()).map(|_| r.random::<f64>()).collect();
        let a = ambiguity_field(&ProbVolume::single(g, p)?)?;
        let masks = taus.iter().map(|&t| gating_mask(&a, t)).collect::<Result<Vec<_>>>()?;
        nested &= masks.windows(2).all(|w| w[1].is_subset_of(&w[0]));
        if trial == 0 {
            counts = masks.iter().map(|m| m.active()).collect();
        }
    }
    ok &= nested && ambiguity(0.5) == 1.0;
    Ok((
        ok,
        format!(
            "band ({lo:.5}, {hi:.5}), {disagree} sweep disagreements, nested over tau {taus:?}: {nested}, active counts {counts:?}"
        ),
    ))
}

fn gradient_checks() -> Result<(bool, String)> {
    const H: f64 = 1e-4;
    const FLOOR: f64 = 1e-8;
    let mut r = rng(3);
    let mut worst = [0.0f64; 4];
    for _ in 0..20 {
        let dims = [0; 3].map(|_| r.random_range(1..=3usize));
        let c = r.random_range(1..=3usize);
        let n = dims.iter().product::<usize>();
        let rand_map = |r: &mut ChaCha8Rng| FeatureMap::<f64>::new(c, dims, (0..c * n).map(|_| r.random_range(-1.0..1.0)).collect());

        // Gated fusion: objective <u, fused> in (f_in, f_ref, alpha).
        let f_in = rand_map(&mut r)?;
        let f_ref = rand_map(&mut r)?;
        let up = rand_map(&mut r)?;
        let p: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let m = gating_mask(&ambiguity_field(&ProbVolume::single(Grid::unit(dims), p)?)?, 0.5)?;
        let alpha = r.random_range(-1.0..1.0);
        let g = gated_fusion_grad(&f_in, &f_ref, &m, alpha, &up)?;
        let len = c * n;
        let mut x: Vec<f64> = f_in.data.iter().chain(&f_ref.data).copied().collect();
        x.push(alpha);
        let mut analytic: Vec<f64> = g.f_in.data.iter().chain(&g.f_ref.data).copied().collect();
        analytic.push(g.alpha);
        let obj = |x: &[f64]| {
            let a = FeatureMap::new(c, dims, x[..len].to_vec()).unwrap();
            let b = FeatureMap::new(c, dims, x[len..2 * len].to_vec()).unwrap();
            let out = gated_fusion(&a, &b, &m, x[2 * len]).unwrap();
            out.data.iter().zip(&up.data).map(|(o, u)| o * u).sum::<f64>()
        };
        let idx: Vec<usize> = (0..x.len()).collect();
        worst[0] = worst[0].max(check_gradient(obj, &x, &analytic, &idx, H, FLOOR).max_rel_error);

        // AWP: objective <u, z> in (X, m).
        let xm = rand_map(&mut r)?;
        let am = SpatialAttentionMap::new(dims, (0..n).map(|_| r.random_range(0.05..1.0)).collect())?;
        let u: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
        let (gx, gm) = awp_grad(&xm, &am, AWP_EPS, &u)?;
        let x: Vec<f64> = xm.data.iter().chain(&am.data).copied().collect();
        let analytic: Vec<f64> = gx.data.iter().chain(&gm.data).copied().collect();
        let obj = |x: &[f64]| {
            let f = FeatureMap::new(c, dims, x[..len].to_vec()).unwrap();
            let mm = SpatialAttentionMap::new(dims, x[len..].to_vec()).unwrap();
            let z = anatomical_weighted_pooling(&f, &mm, AWP_EPS).unwrap();
            z.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()
        };
        let idx: Vec<usize> = (0..x.len()).collect();
        worst[1] = worst[1].max(check_gradient(obj, &x, &analytic, &idx, H, FLOOR).max_rel_error);

        // Cross-entropy and soft Dice in the probability entries.
        let classes = r.random_range(2..=4usize);
        let grid = Grid::unit(dims);
        let labels = LabelVolume::new(grid, (0..n).map(|_| r.random_range(0..classes as u16)).collect(), classes as u16)?;
        let probs = ProbVolume::new(grid, classes, (0..classes * n).map(|_| r.random_range(0.2..1.0)).collect())?;
        let cfg = LossConfig::default();
        let idx: Vec<usize> = (0..probs.data.len()).collect();
        let (_, g_ce) = cross_entropy(&probs, &labels, &cfg)?;
        let obj = |x: &[f64]| cross_entropy(&ProbVolume::new(grid, classes, x.to_vec()).unwrap(), &labels, &cfg).unwrap().0;
        worst[2] = worst[2].max(check_gradient(obj, &probs.data, &g_ce, &idx, H, FLOOR).max_rel_error);
        let g_dc = soft_dice(&probs, &labels, &cfg)?.grad;
        let obj = |x: &[f64]| soft_dice(&ProbVolume::new(grid, classes, x.to_vec()).unwrap(), &labels, &cfg).unwrap().loss;
        worst[3] = worst[3].max(check_gradient(obj, &probs.data, &g_dc, &idx, H, FLOOR).max_rel_error);
    }
    let ok = worst.iter().all(|&w| w < 1e-6);
    Ok((
        ok,
        format!(
            "20 instances each, h = {H:e}, max relative error: fusion {:.1e}, awp {:.1e}, ce {:.1e}, dice {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    ))
}

fn awp_gap_reduction() -> Result<(bool, String)> {
    let mut r = rng(4);
    let mut ok = true;
    let mut worst_ratio = 0.0f64;
    for trial in 0..10 {
        let dims = [0; 3].map(|_| r.random_range(2..=12usize));
        let c = r.random_range(1..=6usize);
        let n = dims.iter().product::<usize>();
        let x = FeatureMap::<f64>::new(c, dims, (0..c * n).map(|_| r.random_range(0.1..2.0)).collect())?;
        let gap = global_average_pooling(&x);
        // A unit map is the strict case; other constants scale the bound by 1/m.
        let m0 = if trial == 0 { 1.0 } else { r.random_range(0.05..1.0) };
        let awp = anatomical_weighted_pooling(&x, &SpatialAttentionMap::uniform(dims, m0), AWP_EPS)?;
        let bound = AWP_EPS / (n as f64 * m0);
        for (a, g) in awp.iter().zip(&gap) {
            let rel = (a - g).abs() / g.abs();
            ok &= rel <= bound;
            worst_ratio = worst_ratio.max(rel / bound);
        }
    }
    // The same reduction through the full attention path with a flat prior.
    let dims = [6, 7, 8];
    let n = dims.iter().product::<usize>();
    let x = FeatureMap::new(4, dims, (0..4 * n).map(|_| r.random_range(0.1f32..2.0)).collect())?;
    let prior = ScalarVolume::filled(Grid::unit(dims), 2.5);
    let mut conv = Conv3dParams::zeros(3, 1, 1);
    conv.weights = vec![0.7, -0.2, 0.4];
    conv.bias = vec![0.1, 0.3, -0.2];
    let ap = AdapterParams { gamma: 1.3, beta: 0.4, ..AdapterParams::with_conv(conv) };
    let tr = sdmaa_forward_traced(&x, &prior, &ap, &ChannelAttentionParams::zeros(4, 2), AWP_EPS)?;
    let m0 = tr.attention.data[0] as f64;
    let flat = tr.attention.data.iter().all(|&v| v == tr.attention.data[0]);
    let gap = global_average_pooling(&x);
    let bound = AWP_EPS / (n as f64 * m0);
    let pipeline_ok = flat
        && tr.descriptor.iter().zip(&gap).all(|(a, g)| (a - g).abs() / g.abs() <= bound * (1.0 + 1e-3) + 1e-12);
    ok &= pipeline_ok;
    Ok((
        ok,
        format!("worst relative gap {:.3} of the eps/(N m) bound; flat-prior attention path matches GAP: {pipeline_ok}", worst_ratio),
    ))
}

fn losses() -> Result<(bool, String)> {
    let cfg = LossConfig::default();
    // Uniform 39-class prediction.
    let c = 39usize;
    let g = Grid::unit([4, 5, 6]);
    let n = g.len();
    let mut r = rng(5);
    let labels = LabelVolume::new(g, (0..n).map(|_| r.random_range(0..c as u16)).collect(), c as u16)?;
    let uniform = ProbVolume::new(g, c, vec![1.0 / c as f64; c * n])?;
    let (ce, _) = cross_entropy(&uniform, &labels, &cfg)?;
    let ce_ok = (ce - 3.6636).abs() <= 1e-4 && (ce - (c as f64).ln()).abs() <= 1e-12;

    // Perfect one-hot prediction with every class present.
    let g2 = Grid::unit([8, 8, 8]);
    let n2 = g2.len();
    let perfect_labels = LabelVolume::new(g2, (0..n2).map(|v| (v % c) as u16).collect(), c as u16)?;
    let mut onehot = vec![0.0; c * n2];
    for v in 0..n2 {
        onehot[(v % c) * n2 + v] = 1.0;
    }
    let dice = soft_dice(&ProbVolume::new(g2, c, onehot)?, &perfect_labels, &cfg)?.loss;
    let dice_ok = dice < 1e-5;

    // Deep supervision against an independent weighted sum.
    let scales = [[8, 8, 8], [4, 4, 4], [2, 2, 2]];
    let k = 5usize;
    let ds_cfg = LossConfig::default().with_scales(scales.len());
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for d in scales {
        let grid = Grid::unit(d);
        preds.push(random_probs(&mut r, grid, k, 0.05));
        gts.push(LabelVolume::new(grid, (0..grid.len()).map(|_| r.random_range(0..k as u16)).collect(), k as u16)?);
    }
    let (report, _) = deep_supervision_loss(&preds, &gts, &ds_cfg)?;
    let mut independent = 0.0;
    for (i, (p, t)) in preds.iter().zip(&gts).enumerate() {
        let w = 1.0 / 2f64.powi(i as i32);
        independent += w * (oracle::cross_entropy(p, t) + oracle::soft_dice(p, t, ds_cfg.eps));
    }
    let ds_diff = (report.total - independent).abs();
    let ds_ok = ds_diff <= 1e-7 && ds_cfg.ds_weights == vec![1.0, 0.5, 0.25];
    Ok((
        ce_ok && dice_ok && ds_ok,
        format!("uniform CE {ce:.6} (ln 39 = {:.6}), perfect Dice loss {dice:.2e}, deep supervision |diff| {ds_diff:.1e}", (c as f64).ln()),
    ))
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn metrics_oracle() -> Result<(bool, String)> {
    let mut r = rng(6);
    let (mut dist_mismatch, mut hd_mismatch, mut worst_assd) = (0usize, 0usize, 0.0f64);
    for _ in 0..100 {
        let cloud = |r: &mut ChaCha8Rng| -> Vec<[f64; 3]> {
            let n = r.random_range(1..=500usize);
            let scale = r.random_range(1.0..40.0);
            (0..n).map(|_| [0; 3].map(|_| r.random_range(0.0..scale))).collect()
        };
        let a = cloud(&mut r);
        let b = cloud(&mut r);
        let sa = SurfacePointSet::from_points(a, None);
        let sb = SurfacePointSet::from_points(b, None);
        let (pa, pb) = (sa.points(), sb.points());
        if sorted(sa.directed_distances(&sb)?) != sorted(oracle::nn_distances(pa, pb))
            || sorted(sb.directed_distances(&sa)?) != sorted(oracle::nn_distances(pb, pa))
        {
            dist_mismatch += 1;
        }
        if hd95(&sa, &sb)? != oracle::hd95(pa, pb) {
            hd_mismatch += 1;
        }
        let (x, y) = (assd(&sa, &sb)?, oracle::assd(pa, pb));
        worst_assd = worst_assd.max((x - y).abs() / y.max(1e-300));
    }
    // Overlap scores against set arithmetic.
    let mut overlap_mismatch = 0usize;
    for _ in 0..20 {
        let g = Grid::unit([0; 3].map(|_| r.random_range(2..=10usize)));
        let p = random_labels(&mut r, g, 4, 0.5);
        let t = random_labels(&mut r, g, 4, 0.5);
        for class in 0..4 {
            let s = dsc_sen(&p, &t, class)?;
            if (s.dsc, s.sen) != oracle::dsc_sen(&p, &t, class) {
                overlap_mismatch += 1;
            }
        }
    }
    // One-voxel dilation of a ball at 1 mm.
    let g = Grid::unit([21, 21, 21]);
    let ball: Vec<u16> = (0..g.len())
        .map(|i| {
            let [z, y, x] = g.coords(i);
            let d2 = [z, y, x].iter().map(|&c| (c as f64 - 10.0).powi(2)).sum::<f64>();
            (d2 <= 36.0) as u16
        })
        .collect();
    let gt = LabelVolume::new(g, ball, 2)?;
    let mut dil = gt.clone();
    for i in 0..g.len() {
        let [z, y, x] = g.coords(i);
        if gt.data[i] == 0 && g.neighbors6(z, y, x).flatten().any(|j| gt.data[j] == 1) {
            dil.data[i] = 1;
        }
    }
    let (sp, sg) = (extract_surface(&dil, 1)?, extract_surface(&gt, 1)?);
    let (h, a) = (hd95(&sp, &sg)?, assd(&sp, &sg)?);
    let dil_ok = h <= 1.0 && a <= h;
    let ok = dist_mismatch == 0 && hd_mismatch == 0 && worst_assd <= 1e-12 && overlap_mismatch == 0 && dil_ok;
    Ok((
        ok,
        format!(
            "100 pairs: {dist_mismatch} distance-set and {hd_mismatch} HD95 mismatches, ASSD rel diff {worst_assd:.1e}; \
             {overlap_mismatch} DSC/SEN mismatches; dilation HD95 {h:.3} mm, ASSD {a:.3} mm"
        ),
    ))
}

/// Per-voxel model used by the stitching check: three softmax channels.
fn pointwise_model(v: f32) -> [f32; 3] {
    let v = v as f64;
    let e = [v, 0.5 * v * v, (3.0 * v).sin()].map(f64::exp);
    let s: f64 = e.iter().sum();
    e.map(|x| (x / s) as f32)
}

fn apply_model(img: &ScalarVolume) -> ProbVolume {
    let n = img.grid.len();
    let mut data = vec![0.0f32; 3 * n];
    for (v, &x) in img.data.iter().enumerate() {
        for (c, p) in pointwise_model(x).into_iter().enumerate() {
            data[c * n + v] = p;
        }
    }
    ProbVolume::new(img.grid, 3, data).unwrap()
}

fn stitch_commutation() -> Result<(bool, String)> {
    let dims = [64, 64, 64];
    let grid = Grid::new(dims, [0.5, 0.5, 0.5])?;
    let mut r = rng(7);
    let img = Volume::from_vec(grid, (0..grid.len()).map(|_| r.random_range(-2.0f32..2.0)).collect())?;
    let whole = apply_model(&img);
    let plan = plan_windows(dims, [32, 32, 32], 0.5, false)?;
    let covered = plan.coverage().iter().all(|&c| c >= 1);
    // Patchwise: crop the image, run the model on the crop, stitch.
    let as_prob = ProbVolume::single(grid, img.data.clone())?;
    let patches: Vec<([usize; 3], ProbVolume)> = plan
        .origins
        .iter()
        .rev()
        .map(|&o| {
            let crop = window_of(&as_prob, o, plan.window);
            (o, apply_model(&Volume { grid: crop.grid, data: crop.data }))
        })
        .collect();
    let mut worst = 0.0f64;
    for w in [WeightWindow::uniform(plan.window), WeightWindow::gaussian(plan.window)] {
        let out = stitch(&patches, &plan, &w, grid)?;
        let d = out.data.iter().zip(&whole.data).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
        worst = worst.max(d);
    }
    Ok((
        covered && worst <= 1e-6,
        format!("{} windows, full coverage: {covered}, max |stitched - whole| {worst:.1e} (uniform and gaussian)", plan.origins.len()),
    ))
}

/// Two single-sphere volumes sharing one grid that encloses both.
fn sphere_pair(c1: [f64; 3], r1: f64, c2: [f64; 3], r2: f64, s: f64) -> Result<(LabelVolume, LabelVolume)> {
    let margin = 2.0 * s;
    let lo: Vec<f64> = (0..3).map(|i| (c1[i] - r1).min(c2[i] - r2) - margin).collect();
    let hi: Vec<f64> = (0..3).map(|i| (c1[i] + r1).max(c2[i] + r2) + margin).collect();
    // (x, y, z) extents to (z, y, x) grid.
    let dims = [2, 1, 0].map(|i| ((hi[i] - lo[i]) / s).ceil() as usize + 1);
    let origin = [lo[2], lo[1], lo[0]];
    let spec = |c: [f64; 3], r: f64, class: u16| PhantomSpec {
        dims,
        spacing: [s; 3],
        origin,
        num_classes: 3,
        shapes: vec![Shape::Sphere { center: c, radius: r, class }],
    };
    Ok((make_phantom(&spec(c1, r1, 1))?, make_phantom(&spec(c2, r2, 2))?))
}

fn pair_distance(a: &LabelVolume, b: &LabelVolume) -> Result<f64> {
    region_distance(Region { labels: a, class: 1 }, Region { labels: b, class: 2 }, MeshMode::IsoSurface)
}

fn random_direction(r: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [0; 3].map(|_| r.random_range(-1.0..1.0f64));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return v.map(|x| x / n);
        }
    }
}

fn clinical_phantom() -> Result<(bool, String)> {
    let mut r = rng(8);
    let configs: Vec<(f64, f64, f64, [f64; 3])> = (0..20)
        .map(|i| {
            if i == 0 {
                (5.0, 3.0, 4.0, [1.0, 0.0, 0.0])
            } else {
                (r.random_range(2.5..5.0), r.random_range(2.5..5.0), r.random_range(0.5..4.0), random_direction(&mut r))
            }
        })
        .collect();
    let mut ok = true;
    let mut worst = Vec::new();
    for (s, bound) in [(0.5, 3f64.sqrt() * 0.5), (0.2, 0.35)] {
        let mut w = 0.0f64;
        for &(r1, r2, gap, dir) in &configs {
            let d = r1 + r2 + gap;
            let c2 = [d * dir[0], d * dir[1], d * dir[2]];
            let (a, b) = sphere_pair([0.0; 3], r1, c2, r2, s)?;
            let e = (pair_distance(&a, &b)? - gap).abs();
            w = w.max(e);
        }
        ok &= w <= bound;
        worst.push((s, w, bound));
    }
    // Overlapping pairs: negative distance with the penetration depth.
    let mut pen_worst = 0.0f64;
    let mut all_negative = true;
    let s = 0.5;
    for i in 0..6 {
        let (r1, r2, pen, dir) = if i == 0 {
            (5.0, 3.0, 2.0, [1.0, 0.0, 0.0])
        } else {
            (r.random_range(2.5..5.0), r.random_range(2.5..5.0), r.random_range(0.5..2.0), random_direction(&mut r))
        };
        let d = r1 + r2 - pen;
        let (a, b) = sphere_pair([0.0; 3], r1, [d * dir[0], d * dir[1], d * dir[2]], r2, s)?;
        let got = pair_distance(&a, &b)?;
        all_negative &= got < 0.0;
        pen_worst = pen_worst.max((-got - pen).abs());
    }
    let diag = 3f64.sqrt() * s;
    ok &= all_negative && pen_worst <= diag;
    let sweep: Vec<String> = worst.iter().map(|(s, w, b)| format!("{s} mm: worst gap error {w:.3} (<= {b:.3})")).collect();
    Ok((
        ok,
        format!("20 pairs, {}; overlap: negative {all_negative}, worst depth error {pen_worst:.3} (<= {diag:.3})", sweep.join(", ")),
    ))
}

/// Scratch directory removed on drop.
struct Scratch(PathBuf);

impl Scratch {
    fn new() -> Result<Self> {
        use std::sync::atomic::{AtomicUsize, Ordering};
        static COUNTER: AtomicUsize = AtomicUsize::new(0);
        let p = std::env::temp_dir().join(format!(
            "voxgeo-selftest-{}-{}",
            std::process::id(),
            COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::create_dir_all(&p)?;
        Ok(Self(p))
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn io_roundtrip() -> Result<(bool, String)> {
    let dir = Scratch::new()?;
    let mut r = rng(9);
    // NIfTI stores geometry as float32, so pick values it represents exactly.
    let grid = Grid::with_origin([5, 6, 7], [0.25, 0.375, 0.5], [-12.5, 3.0, 40.25])?;
    let n = grid.len();
    let narrow = LabelVolume::new(grid, (0..n).map(|_| r.random_range(0..40)).collect(), 40)?;
    let wide = LabelVolume::new(grid, (0..n).map(|_| r.random_range(0..1000)).collect(), 1000)?;
    let scalar = ScalarVolume::from_vec(grid, (0..n).map(|_| f32::from_bits(r.random_range(0x0080_0000..0x7f00_0000)) * if r.random_bool(0.5) { -1.0 } else { 1.0 }).collect())?;
    let prob = random_probs(&mut r, grid, 4, 0.0).cast::<f32>();
    let mut cases = 0;
    let mut failures = Vec::new();
    for ext in ["nii", "raw"] {
        let check = |name: &str, same: bool, bytes_same: bool, failures: &mut Vec<String>| {
            if !(same && bytes_same) {
                failures.push(format!("{name}.{ext}"));
            }
        };
        for (name, vol, force_wide) in [("u8", &narrow, false), ("i16", &wide, true), ("i16w", &narrow, true)] {
            let p = dir.0.join(format!("{name}.{ext}"));
            io::write_labels_with(vol, &p, force_wide)?;
            let back = io::read_labels(&p)?;
            let first = std::fs::read(&p)?;
            io::write_labels_with(&back, &p, force_wide)?;
            check(name, back == *vol, std::fs::read(&p)? == first, &mut failures);
            cases += 1;
        }
        let p = dir.0.join(format!("f32.{ext}"));
        io::write_volume(&scalar.clone().into(), &p)?;
        let back = io::read_scalar(&p)?;
        let bitwise = back.grid == scalar.grid && back.data.iter().zip(&scalar.data).all(|(a, b)| a.to_bits() == b.to_bits());
        let first = std::fs::read(&p)?;
        io::write_volume(&back.into(), &p)?;
        check("f32", bitwise, std::fs::read(&p)? == first, &mut failures);
        let p = dir.0.join(format!("prob.{ext}"));
        io::write_volume(&prob.clone().into(), &p)?;
        let back = io::read_prob(&p)?;
        let first = std::fs::read(&p)?;
        io::write_volume(&back.clone().into(), &p)?;
        check("prob", back == prob, std::fs::read(&p)? == first, &mut failures);
        cases += 2;
    }
    Ok((
        failures.is_empty(),
        format!("{cases} round trips (uint8/int16 labels, float32 scalar and 4-channel) over NIfTI and raw; failures: {failures:?}"),
    ))
}
