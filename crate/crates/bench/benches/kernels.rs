use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use obft_core::numerics::{matmul, qr_decompose, Matrix};
use obft_core::obfmat::{random_orthogonal, random_prescribed_kappa};
use obft_core::rng::{stream, SeededRng};
use std::hint::black_box;

fn gaussian(n: usize, m: usize, seed: u64) -> Matrix<f32> {
    SeededRng::new(seed, stream::MISC).gaussian_matrix(n, m)
}

fn bench_matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for &(m, k, n) in &[(64, 128, 128), (64, 128, 512), (128, 128, 128)] {
        let a = gaussian(m, k, 1);
        let b = gaussian(k, n, 2);
        g.bench_with_input(
            BenchmarkId::from_parameter(format!("{m}x{k}x{n}")),
            &(a, b),
            |bch, (a, b)| bch.iter(|| matmul(black_box(a), black_box(b)).unwrap()),
        );
    }
    g.finish();
}

fn bench_keys(c: &mut Criterion) {
    let mut g = c.benchmark_group("keys");
    g.sample_size(10);
    let a: Matrix<f64> = SeededRng::new(3, stream::MISC).gaussian_matrix(128, 128);
    g.bench_function("qr_128", |b| {
        b.iter(|| qr_decompose(black_box(&a)).unwrap())
    });
    g.bench_function("orthogonal_128", |b| {
        b.iter(|| random_orthogonal(128, black_box(7)).unwrap())
    });
    g.bench_function("kappa_1e3_128", |b| {
        b.iter(|| random_prescribed_kappa(128, 1e3, black_box(7)).unwrap())
    });
    g.finish();
}

criterion_group!(benches, bench_matmul, bench_keys);
criterion_main!(benches);
