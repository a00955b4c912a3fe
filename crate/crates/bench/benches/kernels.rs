use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use unimixer_bench::{input, lite, lite_model, raw_square, unimixing};
use unimixer_core::mixing::{constrained_weights, forward_apply, lite_materialize, naive_apply, MulCounter};
use unimixer_core::sinkhorn::{sinkhorn_fixed, sinkhorn_knopp, ConstraintConfig};
use unimixer_core::train::loss_and_grads;

fn mixing(c: &mut Criterion) {
    let mut g = c.benchmark_group("unimixing");
    for (l, b) in [(96, 4), (384, 6), (768, 6)] {
        let w = constrained_weights(&unimixing(l, b)).unwrap();
        let x = input(l, 9);
        g.bench_with_input(BenchmarkId::new("naive", format!("L{l}_B{b}")), &x, |bench, x| {
            bench.iter(|| naive_apply(black_box(x), &w, &mut MulCounter::default()).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("optimized", format!("L{l}_B{b}")), &x, |bench, x| {
            bench.iter(|| forward_apply(black_box(x), &w, &mut MulCounter::default()).unwrap())
        });
    }
    let p = lite(768, 6, 8, 4);
    g.bench_function("lite_materialize_L768_B6", |bench| bench.iter(|| lite_materialize(black_box(&p)).unwrap()));
    g.finish();
}

fn sinkhorn(c: &mut Criterion) {
    let mut g = c.benchmark_group("sinkhorn");
    let cfg = ConstraintConfig::default();
    for n in [16, 64, 128] {
        let w = raw_square(n);
        g.bench_with_input(BenchmarkId::new("converge", n), &w, |bench, w| {
            bench.iter(|| sinkhorn_knopp(black_box(w), &cfg).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("fixed20", n), &w, |bench, w| {
            bench.iter(|| sinkhorn_fixed(black_box(w), 1.0, 20, false).unwrap())
        });
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("loss_and_grads");
    g.sample_size(10);
    for (d, b) in [(8, 4), (16, 8), (32, 16)] {
        let (m, batch, labels) = lite_model(d, b, 128);
        g.bench_function(BenchmarkId::new("lite_batch128", format!("D{d}_B{b}")), |bench| {
            bench.iter(|| loss_and_grads(&m, &batch, &labels, 1.0).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, mixing, sinkhorn, train_step);
criterion_main!(benches);
