use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use hgf_bench::{activations, latent_weight, ternary_weight, trits};
use hgf_core::quant::{pack_trits, ternary_forward, unpack_trits};
use hgf_core::{ArchMode, HgfModel, ModelConfig, PackingMode};

fn linear(c: &mut Criterion) {
    let mut group = c.benchmark_group("linear");
    for &d in &[64usize, 256] {
        let x = activations(64, d, 1);
        let w = latent_weight(d, d, 2);
        let tern = ternary_weight(d, d, PackingMode::TwoBit, 2);
        group.throughput(Throughput::Elements((64 * d * d) as u64));
        group.bench_with_input(BenchmarkId::new("dense", d), &d, |b, _| {
            b.iter(|| black_box(x.matmul(&w).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("ternary", d), &d, |b, _| {
            b.iter(|| black_box(ternary_forward(&x, &tern).unwrap()))
        });
    }
    group.finish();
}

fn codec(c: &mut Criterion) {
    let n = 1 << 16;
    let t = trits(n, 3);
    let mut group = c.benchmark_group("codec");
    group.throughput(Throughput::Elements(n as u64));
    for (name, mode) in [("2bit", PackingMode::TwoBit), ("5pb", PackingMode::FivePerByte)] {
        let packed = pack_trits(&t, mode).unwrap();
        group.bench_function(BenchmarkId::new("pack", name), |b| {
            b.iter(|| black_box(pack_trits(&t, mode).unwrap()))
        });
        group.bench_function(BenchmarkId::new("unpack", name), |b| {
            b.iter(|| black_box(unpack_trits(&packed, n, mode).unwrap()))
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("desk_forward");
    group.sample_size(10);
    let ids: Vec<usize> = (0..4 * 64).map(|i| (i * 31) % 256).collect();
    for mode in [ArchMode::BaselineFp, ArchMode::Bitnet, ArchMode::HgfFull] {
        let model = HgfModel::init(ModelConfig::desk(mode), 0).unwrap();
        group.bench_function(mode.as_str(), |b| {
            b.iter(|| black_box(model.logits(&ids, 4, 64).unwrap()))
        });
        if mode.is_quantized() {
            let exported = model.export_ternary(PackingMode::TwoBit).unwrap();
            group.bench_function(format!("{}-exported", mode.as_str()), |b| {
                b.iter(|| black_box(exported.logits(&ids, 4, 64).unwrap()))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, linear, codec, forward);
criterion_main!(benches);
