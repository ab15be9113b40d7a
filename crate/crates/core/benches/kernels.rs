//! Hot kernels under a one-thread pool and under the default pool. Built
//! without the `parallel` feature both rows measure the sequential path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::ThreadPool;

use voxgeo_core::conv::{conv3d_forward, Conv3dParams};
use voxgeo_core::metrics::{extract_surface, hd95};
use voxgeo_core::sdm::signed_distance_map;
use voxgeo_core::stitch::{plan_windows, stitch, window_of, WeightWindow};
use voxgeo_core::{FeatureMap, Grid, LabelVolume, ProbVolume};

fn pools() -> Vec<(&'static str, ThreadPool)> {
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let all = rayon::ThreadPoolBuilder::new().build().unwrap();
    vec![("1-thread", one), ("default", all)]
}

fn ball(dims: [usize; 3], center: [f64; 3], r: f64, class: u16) -> LabelVolume {
    let g = Grid::unit(dims);
    let data = (0..g.len())
        .map(|i| {
            let c = g.coords(i);
            let d2: f64 = (0..3).map(|a| (c[a] as f64 - center[a]).powi(2)).sum();
            if d2 <= r * r {
                class
            } else {
                0
            }
        })
        .collect();
    LabelVolume::new(g, data, class + 1).unwrap()
}

fn bench_edt(c: &mut Criterion) {
    let labels = ball([64, 64, 64], [32.0; 3], 20.0, 1);
    let mut group = c.benchmark_group("edt_64");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| signed_distance_map(&labels, &[1]).unwrap()))
        });
    }
    group.finish();
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dims = [24, 24, 24];
    let n: usize = dims.iter().product();
    let x = FeatureMap::new(4, dims, (0..4 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let w = (0..8 * 4 * 27).map(|_| rng.random_range(-0.2..0.2)).collect();
    let p = Conv3dParams::new(8, 4, 3, w, vec![0.0; 8]).unwrap();
    let mut group = c.benchmark_group("conv3d_4to8_k3_24");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| pool.install(|| conv3d_forward(&x, &p).unwrap())));
    }
    group.finish();
}

fn bench_stitch(c: &mut Criterion) {
    let dims = [64, 64, 64];
    let g = Grid::unit(dims);
    let n = g.len();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data: Vec<f32> = (0..2 * n).map(|_| rng.random::<f32>()).collect();
    let whole = ProbVolume::new(g, 2, data).unwrap();
    let plan = plan_windows(dims, [32, 32, 32], 0.5, false).unwrap();
    let patches: Vec<_> = plan.origins.iter().map(|&o| (o, window_of(&whole, o, plan.window))).collect();
    let w = WeightWindow::gaussian(plan.window);
    let mut group = c.benchmark_group("stitch_64_w32");
    group.sample_size(20);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| pool.install(|| stitch(&patches, &plan, &w, g).unwrap())));
    }
    group.finish();
}

fn bench_hd95(c: &mut Criterion) {
    let a = ball([64, 64, 64], [32.0; 3], 20.0, 1);
    let b = ball([64, 64, 64], [33.0, 31.5, 32.0], 19.0, 1);
    let (sa, sb) = (extract_surface(&a, 1).unwrap(), extract_surface(&b, 1).unwrap());
    let mut group = c.benchmark_group("hd95_r20");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |bch| bch.iter(|| pool.install(|| hd95(&sa, &sb).unwrap())));
    }
    group.finish();
}

criterion_group!(benches, bench_edt, bench_conv, bench_stitch, bench_hd95);
criterion_main!(benches);
