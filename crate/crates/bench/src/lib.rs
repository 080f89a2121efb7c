//! Benchmark fixtures shared by the criterion targets.

use optzoo_core::Matrix;

/// Deterministic dense matrix with entries in `[-1, 1]`.
pub fn fixture(rows: usize, cols: usize, salt: u64) -> Matrix {
    Matrix::from_fn(rows, cols, |i, j| {
        let k = (i * cols + j) as u64 ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        ((k as f64) * 0.618_033_988_75).sin()
    })
}

/// Symmetric positive definite matrix `F Fᵀ / n + I`.
pub fn spd_fixture(n: usize, salt: u64) -> Matrix {
    let f = fixture(n, n, salt);
    &f * f.transpose() / n as f64 + Matrix::identity(n, n)
}
