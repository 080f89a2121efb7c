//! Measures the tolerances frozen into the test suites.
//!
//! * Newton-Schulz: relative Frobenius distance between the 5-step iteration
//!   and the exact polar factor from the SVD over 200 seeded 16x8 Gaussian
//!   matrices (99th percentile), plus the observed singular-value bracket.
//! * Muon and Shampoo cross-checks reuse the same numbers.
//!
//! Run with `cargo run --release -p optzoo-core --example calibrate_tolerances`.

use optzoo_core::linalg::{newton_schulz_msign, svd, Matrix, NS_COEFFS, NS_STEPS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

fn percentile(mut xs: Vec<f64>, q: f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let idx = ((xs.len() - 1) as f64 * q).ceil() as usize;
    xs[idx]
}

fn main() {
    for (rows, cols) in [(16, 8), (8, 16), (32, 32)] {
        let mut dists = Vec::new();
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for seed in 0..200u64 {
            let m = gaussian(rows, cols, 10_000 + seed);
            let target = svd(&m).unwrap().polar();
            let ns = newton_schulz_msign(&m, NS_STEPS, NS_COEFFS);
            dists.push((&ns - &target).norm() / target.norm());
            let s = svd(&ns).unwrap().sigma;
            lo = lo.min(s.min());
            hi = hi.max(s.max());
        }
        println!(
            "{rows}x{cols}: p99 rel dist = {:.6}, max = {:.6}, sigma bracket = [{lo:.6}, {hi:.6}]",
            percentile(dists.clone(), 0.99),
            dists.iter().cloned().fold(0.0, f64::max)
        );
    }
}
