use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dskd_bench::random_pyramid;
use dskd_core::losses::{affinity_kl_map_chunked, global_loss, local_loss};

fn local(c: &mut Criterion) {
    let t = random_pyramid(8, 32, [16, 32, 64], 0);
    let s = random_pyramid(8, 32, [16, 32, 64], 1);
    c.bench_function("local_loss b8 32px", |b| b.iter(|| local_loss(&t, &s).unwrap()));
}

fn global(c: &mut Criterion) {
    let mut g = c.benchmark_group("affinity_kl");
    g.sample_size(10);
    for side in [8, 16, 32] {
        let t = random_pyramid(4, side, [16, 32, 64], 2);
        let s = random_pyramid(4, side, [16, 32, 64], 3);
        g.bench_with_input(BenchmarkId::new("level0", side * side), &side, |b, _| {
            b.iter(|| affinity_kl_map_chunked(&t.levels[0], &s.levels[0], 1.0, 1024).unwrap())
        });
    }
    g.finish();
}

fn global_backward(c: &mut Criterion) {
    let t = random_pyramid(4, 32, [16, 32, 64], 4);
    let s = random_pyramid(4, 32, [16, 32, 64], 5);
    let vars: Vec<candle_core::Var> = s
        .levels
        .iter()
        .map(|l| candle_core::Var::from_tensor(&l.tensor).unwrap())
        .collect();
    let tracked = dskd_core::FeaturePyramid::new(std::array::from_fn(|l| {
        dskd_core::FeatureMap::new(vars[l].as_tensor().clone(), l).unwrap()
    }))
    .unwrap();
    let mut g = c.benchmark_group("global_loss");
    g.sample_size(10);
    g.bench_function("forward+backward b4 32px", |b| {
        b.iter(|| global_loss(&t, &tracked, 1.0, 1024).unwrap().backward().unwrap())
    });
    g.finish();
}

criterion_group!(benches, local, global, global_backward);
criterion_main!(benches);
