use std::hint::black_box;

use btm_bench::{batch, params, surrogate, uniform_matrix};
use btm_core::condense::{meta_gradient, student_unroll};
use btm_core::linalg::svd;
use btm_core::surrogate::chord_report;
use btm_core::{MixedGradStrategy, Mlp, MlpConfig, Trajectory};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn bench_svd(c: &mut Criterion) {
    let mut g = c.benchmark_group("svd");
    for (rows, cols) in [(200, 40), (705, 50), (500, 200)] {
        let a = uniform_matrix(rows, cols, 1);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{rows}x{cols}")), &a, |b, a| {
            b.iter(|| svd(black_box(a)).unwrap())
        });
    }
    g.finish();
}

fn bench_grad(c: &mut Criterion) {
    let mut g = c.benchmark_group("grad_params");
    let cfg = MlpConfig::new(20, 32);
    let mlp = Mlp::new(cfg).unwrap();
    let theta = params(&cfg, 3);
    for n in [20, 256, 2600] {
        let data = batch(n, 20, 4);
        g.bench_with_input(BenchmarkId::from_parameter(n), &data, |b, data| {
            b.iter(|| mlp.grad_params(black_box(&theta), data).unwrap())
        });
    }
    g.finish();
}

fn bench_unroll(c: &mut Criterion) {
    let cfg = MlpConfig::new(20, 32);
    let mlp = Mlp::new(cfg).unwrap();
    let theta = params(&cfg, 5);
    let data = batch(20, 20, 6);
    let (x, y) = (data.x.clone(), data.y.clone());
    c.bench_function("unroll/30_steps", |b| {
        b.iter(|| student_unroll(&mlp, &theta, &x, &y, 30, 0.01, 20, 7).unwrap())
    });
    let trace = student_unroll(&mlp, &theta, &x, &y, 30, 0.01, 20, 7).unwrap();
    let target = params(&cfg, 8);
    let mut g = c.benchmark_group("meta_gradient");
    for (name, s) in [
        ("parameter_shift", MixedGradStrategy::ParameterShift),
        ("analytic", MixedGradStrategy::Analytic),
    ] {
        g.bench_function(name, |b| {
            b.iter(|| meta_gradient(&mlp, &trace, &theta, &target, &x, &y, s).unwrap())
        });
    }
    g.finish();
}

fn bench_chord(c: &mut Criterion) {
    let p = 705;
    let s = surrogate(p, 9);
    let teacher = Trajectory::new((0..=100).map(|k| s.eval(k as f64 / 100.0).unwrap()).collect()).unwrap();
    c.bench_function("chord_report/p705_T100", |b| {
        b.iter(|| chord_report(black_box(&s), &teacher, 1001).unwrap())
    });
}

criterion_group!(benches, bench_svd, bench_grad, bench_unroll, bench_chord);
criterion_main!(benches);
