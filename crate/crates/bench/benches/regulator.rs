use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use srcl_bench::embeddings;
use srcl_core::numerics::cosine_matrix;
use srcl_core::regulator::regulation_weights;
use srcl_core::RegulatorConfig;

fn weights(c: &mut Criterion) {
    let cfg = RegulatorConfig::default();
    let mut group = c.benchmark_group("regulation_weights");
    for n in [16, 64, 256] {
        let (ta, tb) = embeddings(n, 16, 3);
        let (sa, sb) = embeddings(n, 16, 4);
        let teacher = cosine_matrix(&ta, &tb).unwrap();
        let student = cosine_matrix(&sa, &sb).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                regulation_weights(&cfg, black_box(&teacher), black_box(&student), 500, 2000, 0.1).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, weights);
criterion_main!(benches);
