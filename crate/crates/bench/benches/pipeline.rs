use criterion::{criterion_group, criterion_main, Criterion};
use nudgeseg_bench::fixture;
use nudgeseg_core::driver::run_trial;
use nudgeseg_core::hypothesis::fresh_segments;
use nudgeseg_core::motioncluster::{cluster_flow, dbscan, flow_point, moving_pixels};
use nudgeseg_core::{refine, warp_masks};

fn clustering(c: &mut Criterion) {
    let f = fixture(1);
    let p = f.config.cluster;
    let moving = moving_pixels(&f.flow, &p, None);
    let points: Vec<_> =
        (0..f.flow.len()).filter(|&i| moving.data[i] && i % p.stride == 0).map(|i| flow_point(&f.flow, i)).collect();
    c.bench_function("dbscan_moving_points", |b| b.iter(|| dbscan(&points, &p)));
    c.bench_function("cluster_flow_full_frame", |b| b.iter(|| cluster_flow(&f.flow, &p, None)));
}

fn masks(c: &mut Criterion) {
    let f = fixture(2);
    let (fresh, _) = fresh_segments(&f.flow, &f.hyp, &f.config.cluster, f.config.hypothesis.static_min_area);
    c.bench_function("warp_masks", |b| b.iter(|| warp_masks(&f.hyp, &f.flow)));
    c.bench_function("refine", |b| b.iter(|| refine(&f.hyp, &fresh, f.config.hypothesis.tau_h)));
}

fn trial(c: &mut Criterion) {
    let f = fixture(3);
    let mut g = c.benchmark_group("trial");
    g.sample_size(10);
    g.bench_function("run_trial", |b| b.iter(|| run_trial(&f.config, 3)));
    g.finish();
}

criterion_group!(benches, clustering, masks, trial);
criterion_main!(benches);
