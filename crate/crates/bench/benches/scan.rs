use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use soi_bench::synthetic_world;
use soi_core::geo::{haversine, GeoPoint};
use soi_core::{detect, SoiConfig};

fn bench_haversine(c: &mut Criterion) {
    let a = GeoPoint::new(49.4521, 11.0767).unwrap();
    let b = GeoPoint::new(1.3521, 103.8198).unwrap();
    c.bench_function("haversine", |bench| bench.iter(|| haversine(black_box(a), black_box(b))));
}

fn bench_detect(c: &mut Criterion) {
    let config = SoiConfig::default();
    let mut group = c.benchmark_group("detect");
    group.sample_size(10);
    for n_probes in [1_000usize, 5_000] {
        let world = synthetic_world(n_probes, 157, 1);
        group.bench_with_input(BenchmarkId::from_parameter(n_probes * 157), &world, |bench, w| {
            bench.iter(|| detect(black_box(&w.observations), &w.registry, &config))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_haversine, bench_detect);
criterion_main!(benches);
