use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use lrqat_core::downcast::{downcast_tensor, pack_codes, unpack_codes, DowncastFormat};
use lrqat_core::lrqat::LrQatLayer;
use lrqat_core::numcore::{matmul, randn, truncated_svd, Rng};
use lrqat_core::quantsim::{estimate_minmax, fake_quant, Granularity, QuantSpec};

fn bench_matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [32, 64, 128] {
        let mut rng = Rng::new(1);
        let a = randn(&mut rng, n, n);
        let b = randn(&mut rng, n, n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    g.finish();
}

fn bench_fake_quant(c: &mut Criterion) {
    let mut rng = Rng::new(2);
    let w = randn(&mut rng, 256, 256);
    let spec = QuantSpec::new(4, true, Granularity::PerChannel).unwrap();
    let params = estimate_minmax(&w, &spec).unwrap();
    c.bench_function("fake_quant/256x256", |b| {
        b.iter(|| fake_quant(black_box(&w), &spec, &params).unwrap())
    });
}

fn bench_lrqat_weight(c: &mut Criterion) {
    let mut g = c.benchmark_group("lrqat_forward_weight");
    let mut rng = Rng::new(3);
    let w = randn(&mut rng, 256, 256);
    let spec = QuantSpec::new(4, true, Granularity::PerChannel).unwrap();
    let params = estimate_minmax(&w, &spec).unwrap();
    for fmt in [DowncastFormat::Bf16, DowncastFormat::FixedPoint(4), DowncastFormat::IntPacked(4)] {
        let mut layer = LrQatLayer::new(&w, &params, spec, fmt, 16, 1.0).unwrap();
        layer.init_lora(&mut rng);
        g.bench_function(fmt.label(), |b| b.iter(|| black_box(&layer).forward_weight()));
    }
    g.finish();
}

fn bench_downcast(c: &mut Criterion) {
    let mut rng = Rng::new(4);
    let v = randn(&mut rng, 256, 256).scale(3.0);
    let codes: Vec<i32> = (0..65536).map(|i| (i % 16) - 8).collect();
    c.bench_function("downcast/int_packed4", |b| {
        b.iter(|| downcast_tensor(black_box(&v), DowncastFormat::IntPacked(4)).unwrap())
    });
    c.bench_function("pack_codes/65536", |b| b.iter(|| pack_codes(black_box(&codes), 4).unwrap()));
    let packed = pack_codes(&codes, 4).unwrap();
    c.bench_function("unpack_codes/65536", |b| {
        b.iter(|| unpack_codes(black_box(&packed), codes.len()))
    });
}

fn bench_svd(c: &mut Criterion) {
    let m = randn(&mut Rng::new(5), 64, 64);
    c.bench_function("truncated_svd/64x64_r8", |b| {
        b.iter(|| truncated_svd(black_box(&m), 8).unwrap())
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_fake_quant,
    bench_lrqat_weight,
    bench_downcast,
    bench_svd
);
criterion_main!(benches);
