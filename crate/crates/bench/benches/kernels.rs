use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use optzoo_bench::{fixture, spd_fixture};
use optzoo_core::linalg::{newton_schulz_msign, psd_power, svd, sym_eig, NS_COEFFS, NS_STEPS};
use std::hint::black_box;

fn kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group("linalg");
    for n in [64usize, 256] {
        let g = fixture(n, n, 1);
        let spd = spd_fixture(n, 2);
        group.bench_with_input(BenchmarkId::new("newton_schulz", n), &g, |b, g| {
            b.iter(|| newton_schulz_msign(black_box(g), NS_STEPS, NS_COEFFS))
        });
        group.bench_with_input(BenchmarkId::new("svd_polar", n), &g, |b, g| {
            b.iter(|| svd(black_box(g)).unwrap().polar())
        });
        group.bench_with_input(BenchmarkId::new("sym_eig", n), &spd, |b, a| b.iter(|| sym_eig(black_box(a)).unwrap()));
        group.bench_with_input(BenchmarkId::new("psd_inverse_root", n), &spd, |b, a| {
            b.iter(|| psd_power(black_box(a), -0.25, 1e-6).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
