use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use edanet_core::analyzer::analyze;
use edanet_core::netdef::{build_variant, Variant};
use edanet_core::runtime::{fold_batch_norm, forward, init_weights, SplitMix64};
use edanet_core::selftest::random_tensor;
use edanet_core::Shape;

fn forward_pass(c: &mut Criterion) {
    let mut rng = SplitMix64::new(3);
    let x = random_tensor(&mut rng, Shape::chw(3, 64, 128));
    let mut group = c.benchmark_group("forward 3x64x128");
    group.sample_size(20);
    for v in [Variant::Edanet, Variant::NonAsym, Variant::Aspp] {
        let net = build_variant(v, 19).unwrap();
        let weights = init_weights(&net, 1).unwrap();
        group.bench_with_input(BenchmarkId::new("unfolded", v), &v, |b, _| {
            b.iter(|| forward(&net, &weights, black_box(&x)).unwrap())
        });
        let folded = fold_batch_norm(&net, &weights).unwrap();
        group.bench_with_input(BenchmarkId::new("folded", v), &v, |b, _| {
            b.iter(|| forward(&folded.net, &folded.weights, black_box(&x)).unwrap())
        });
    }
    group.finish();
}

fn analysis(c: &mut Criterion) {
    let mut group = c.benchmark_group("analyze 3x512x1024");
    for v in Variant::ALL {
        let net = build_variant(v, 19).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(v), &net, |b, net| {
            b.iter(|| analyze(black_box(net), Shape::chw(3, 512, 1024)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward_pass, analysis);
criterion_main!(benches);
