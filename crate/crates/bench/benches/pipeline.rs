use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use spgi::{
    correlate_gi, demultiplex, generate_diffuser, preprocess, reconstruct_tv, run_campaign, speckle_stack, CameraModel,
    Preprocessing, SensingSystem, TvConfig,
};
use spgi_bench::{frame_fixture, sampling, scene, PITCH_UM};

fn simulation(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulation");
    g.sample_size(10);
    g.bench_function("diffuser_512", |b| b.iter(|| generate_diffuser(3, 512, 512, 10.0 / 6.5).unwrap()));
    let stack = speckle_stack(2, (32, 32), 1024, 10.0 / 6.5, PITCH_UM as f32).unwrap();
    let sc = scene(32);
    let s = sampling(&stack, &sc, 9.5e4);
    let camera = CameraModel::disabled(PITCH_UM);
    g.bench_function("campaign_32x32_n1024", |b| b.iter(|| run_campaign(&stack, &camera, &sc, &s).unwrap()));
    let records = run_campaign(&stack, &camera, &sc, &s).unwrap().records;
    g.bench_function("demux_n1024", |b| b.iter(|| demultiplex(black_box(&records)).unwrap()));
    g.finish();
}

fn reconstruction(c: &mut Criterion) {
    let mut g = c.benchmark_group("reconstruction");
    g.sample_size(10);
    for side in [32usize, 64] {
        let n = side * side / 2;
        let (stack, frame) = frame_fixture(side, n, 9.5e4);
        g.bench_with_input(BenchmarkId::new("correlation", side), &side, |b, _| {
            b.iter(|| correlate_gi(&stack, &frame).unwrap())
        });
        let sys = preprocess(&SensingSystem::new(&stack, &frame.values).unwrap(), Preprocessing::MeanCentered).unwrap();
        let cfg = TvConfig { max_outer: 50, outer_tol: 1e-12, ..TvConfig::default() };
        sys.matrix.spectral_norm();
        g.bench_with_input(BenchmarkId::new("tv_50_iterations", side), &side, |b, _| {
            b.iter(|| reconstruct_tv(&sys, &cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, simulation, reconstruction);
criterion_main!(benches);
