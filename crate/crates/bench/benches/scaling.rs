use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use turnpack_bench::fixture;
use turnpack_core::{
    build_layout, build_token_mask, expand_to_passes, init_model, pack, Model, ModelConfig,
};

fn bench_pack(c: &mut Criterion) {
    let mut group = c.benchmark_group("pack");
    for &n in &[4usize, 16, 64] {
        let convo = fixture(n, 16);
        let packed_len = (4 * 16 * n) as u64;
        group.throughput(Throughput::Elements(packed_len));
        group.bench_with_input(BenchmarkId::from_parameter(n), &convo, |b, convo| {
            b.iter(|| pack(convo));
        });
    }
    group.finish();
}

fn bench_token_mask(c: &mut Criterion) {
    let mut group = c.benchmark_group("token_mask");
    group.sample_size(20);
    for &n in &[4usize, 16, 64] {
        let table = build_layout(&fixture(n, 16));
        let cells = (table.total_len() as u64).pow(2);
        group.throughput(Throughput::Elements(cells));
        group.bench_with_input(BenchmarkId::from_parameter(n), &table, |b, table| {
            b.iter(|| build_token_mask(table, usize::MAX).unwrap());
        });
    }
    group.finish();
}

fn bench_expand(c: &mut Criterion) {
    let mut group = c.benchmark_group("expand");
    for &n in &[4usize, 16, 64] {
        let convo = fixture(n, 16);
        group.bench_with_input(BenchmarkId::from_parameter(n), &convo, |b, convo| {
            b.iter(|| expand_to_passes(convo));
        });
    }
    group.finish();
}

/// The claim the rest of the crate proves correct, timed: one packed forward
/// pass against the n naive per-turn passes, on the same small model.
fn bench_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    for &n in &[2usize, 4, 8] {
        let convo = fixture(n, 8);
        let model: Model<f64> = init_model(&ModelConfig::new(97, 32, 1, 1).with_seed(7)).unwrap();

        let packed = pack(&convo);
        let mask = packed.mask.clone().unwrap();
        group.bench_function(BenchmarkId::new("packed", n), |b| {
            b.iter(|| {
                model
                    .forward(&packed.tokens, &packed.position_ids, &mask)
                    .unwrap()
            });
        });

        let passes = expand_to_passes(&convo);
        group.bench_function(BenchmarkId::new("naive", n), |b| {
            b.iter(|| {
                for pass in &passes {
                    model
                        .forward(&pass.tokens, &pass.position_ids, &pass.mask)
                        .unwrap();
                }
            });
        });
    }
    group.finish();
}

criterion_group!(benches, bench_pack, bench_token_mask, bench_expand, bench_forward);
criterion_main!(benches);
