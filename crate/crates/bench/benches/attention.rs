use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use glatts_core::attention::{
    gla_chunkwise, gla_parallel, gla_recurrent, softmax_attention, AttentionInputs, DecayGates, GlaState,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn forms(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group("attention_forms");
    for n in [64usize, 256] {
        let inp = AttentionInputs::random(n, 16, 16, &mut rng);
        let gates = DecayGates::random(n, 16, 0.9, 0.999, &mut rng);
        let s0 = GlaState::zeros(16, 16);
        g.bench_with_input(BenchmarkId::new("gla_recurrent", n), &n, |b, _| {
            b.iter(|| gla_recurrent(&inp, &gates, &s0).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("gla_parallel", n), &n, |b, _| {
            b.iter(|| gla_parallel(&inp, &gates, &s0).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("gla_chunkwise_16", n), &n, |b, _| {
            b.iter(|| gla_chunkwise(&inp, &gates, &s0, 16).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("softmax_causal", n), &n, |b, _| {
            b.iter(|| softmax_attention(&inp, true).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, forms);
criterion_main!(benches);
