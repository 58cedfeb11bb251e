use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use glatts_core::eval::throughput::{AttentionKind, BenchConfig, Engine};

fn decode(c: &mut Criterion) {
    let cfg = BenchConfig::default();
    let mut g = c.benchmark_group("decode_256_steps");
    g.sample_size(10);
    for kind in [AttentionKind::Gla, AttentionKind::Softmax] {
        let engine = Engine::<f32>::new(&cfg, kind).unwrap();
        for batch in [1usize, 16] {
            g.throughput(Throughput::Elements((batch * 256) as u64));
            g.bench_with_input(BenchmarkId::new(kind.name(), batch), &batch, |b, &batch| {
                b.iter(|| engine.run(batch, 256))
            });
        }
    }
    g.finish();
}

criterion_group!(benches, decode);
criterion_main!(benches);
