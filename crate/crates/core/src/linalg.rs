//! Dense 64-bit linear algebra used by the preconditioners.
//!
//! Decompositions are backed by `nalgebra`; this module pins the conventions
//! the optimizers rely on (eigenvalue ordering, deterministic signs, damping
//! and clamping of fractional powers) and adds the Newton-Schulz iteration.

use nalgebra::{DMatrix, DVector, SymmetricEigen, QR, SVD};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Default Newton-Schulz coefficients `(a, b, c)` tuned for five iterations.
pub const NS_COEFFS: (f64, f64, f64) = (3.4445, -4.7750, 2.0315);
pub const NS_STEPS: usize = 5;
/// Relative Frobenius distance between the Newton-Schulz output and the
/// exact polar factor, 99th percentile over seeded 16x8 Gaussian matrices.
/// Measured by the `calibrate_tolerances` example.
pub const NS_REL_TOLERANCE: f64 = 0.2514;
/// Singular values of the Newton-Schulz output on the same matrices.
pub const NS_SIGMA_BRACKET: (f64, f64) = (0.6818, 1.1344);

const SYMMETRY_TOL: f64 = 1e-8;

/// Eigendecomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub eigenvalues: Vector,
    pub eigenvectors: Matrix,
}

impl SymEig {
    pub fn reconstruct(&self) -> Matrix {
        let v = &self.eigenvectors;
        v * Matrix::from_diagonal(&self.eigenvalues) * v.transpose()
    }
}

/// Reduced SVD `G = U diag(sigma) Vᵀ` with `sigma` descending.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vector,
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        &self.u * Matrix::from_diagonal(&self.sigma) * self.v.transpose()
    }

    /// The polar factor `U Vᵀ`.
    pub fn polar(&self) -> Matrix {
        &self.u * self.v.transpose()
    }
}

pub fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn check_symmetric(a: &Matrix) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Shape(format!(
            "expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    ensure_finite(a, "symmetric matrix")?;
    let scale = a.amax().max(1.0);
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::Shape(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Flips `col` so that its largest-magnitude entry is positive. Returns
/// whether a flip happened. Ties resolve to the lowest index.
fn canonical_sign(col: &mut nalgebra::DVectorViewMut<'_, f64>) -> bool {
    let mut best = 0;
    let mut best_abs = -1.0;
    for (i, x) in col.iter().enumerate() {
        if x.abs() > best_abs {
            best_abs = x.abs();
            best = i;
        }
    }
    if col[best] < 0.0 {
        col.neg_mut();
        true
    } else {
        false
    }
}

pub fn sym_eig(a: &Matrix) -> Result<SymEig> {
    check_symmetric(a)?;
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));

    let mut values = Vector::zeros(n);
    let mut vectors = Matrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        values[k] = eig.eigenvalues[i];
        vectors.set_column(k, &eig.eigenvectors.column(i));
        canonical_sign(&mut vectors.column_mut(k));
    }
    Ok(SymEig {
        eigenvalues: values,
        eigenvectors: vectors,
    })
}

pub fn svd(g: &Matrix) -> Result<SvdResult> {
    ensure_finite(g, "svd input")?;
    let k = g.nrows().min(g.ncols());
    let dec = SVD::new(g.clone(), true, true);
    let u_raw = dec.u.expect("left singular vectors requested");
    let vt_raw = dec.v_t.expect("right singular vectors requested");

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| dec.singular_values[j].total_cmp(&dec.singular_values[i]));

    let mut sigma = Vector::zeros(k);
    let mut u = Matrix::zeros(g.nrows(), k);
    let mut v = Matrix::zeros(g.ncols(), k);
    for (pos, &i) in order.iter().enumerate() {
        sigma[pos] = dec.singular_values[i].max(0.0);
        u.set_column(pos, &u_raw.column(i));
        v.set_column(pos, &vt_raw.row(i).transpose());
        if canonical_sign(&mut u.column_mut(pos)) {
            v.column_mut(pos).neg_mut();
        }
    }
    Ok(SvdResult { u, sigma, v })
}

/// `V (max(Λ, 0) + damp I)^p Vᵀ` for symmetric `A`. Eigenvalues within
/// `n ε max|λ|` of zero count as zero.
pub fn psd_power(a: &Matrix, p: f64, damp: f64) -> Result<Matrix> {
    if !(damp >= 0.0) {
        return Err(Error::Config(format!("damping must be >= 0, got {damp}")));
    }
    let eig = sym_eig(a)?;
    let n = eig.eigenvalues.len();
    // Eigenvalues at rounding level are numerically zero.
    let floor = eig.eigenvalues.amax() * n as f64 * f64::EPSILON;
    let mut scaled = Vector::zeros(n);
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        let shifted = if lam <= floor { 0.0 } else { lam } + damp;
        if p < 0.0 && shifted == 0.0 {
            return Err(Error::Singular { exponent: p });
        }
        scaled[i] = if p == 0.0 { 1.0 } else { shifted.powf(p) };
    }
    let v = &eig.eigenvectors;
    let mut vs = v.clone();
    for (j, mut col) in vs.column_iter_mut().enumerate() {
        col *= scaled[j];
    }
    Ok(vs * v.transpose())
}

/// Approximate `U Vᵀ` of `m` with a quintic Newton-Schulz iteration.
///
/// A zero input returns a zero matrix of the same shape.
pub fn newton_schulz_msign(m: &Matrix, steps: usize, coeffs: (f64, f64, f64)) -> Matrix {
    let norm = m.norm();
    if norm == 0.0 {
        return Matrix::zeros(m.nrows(), m.ncols());
    }
    let (a, b, c) = coeffs;
    let transpose = m.nrows() > m.ncols();
    let mut x = if transpose {
        m.transpose() / norm
    } else {
        m / norm
    };
    for _ in 0..steps {
        let gram = &x * x.transpose();
        let poly = &gram * b + (&gram * &gram) * c;
        x = &x * a + poly * &x;
    }
    if transpose {
        x.transpose()
    } else {
        x
    }
}

/// Orthonormal basis for the column span of a tall matrix, with the
/// triangular factor's diagonal made positive.
pub fn qr_orthonormal(m: &Matrix) -> Result<Matrix> {
    let (n, d) = m.shape();
    if n < d {
        return Err(Error::Shape(format!(
            "qr_orthonormal needs rows >= cols, got {n}x{d}"
        )));
    }
    ensure_finite(m, "qr input")?;
    let qr = QR::new(m.clone());
    let r = qr.r();
    let mut q = qr.q();
    let rmax = r.diagonal().amax();
    if rmax == 0.0 {
        return Err(Error::Degenerate("input matrix is zero".into()));
    }
    for j in 0..d {
        let rjj = r[(j, j)];
        if rjj.abs() <= 1e-12 * rmax {
            return Err(Error::Degenerate(format!(
                "column {j} is (numerically) linearly dependent"
            )));
        }
        if rjj < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

/// Frobenius inner product `⟨a, b⟩`.
pub fn inner(a: &Matrix, b: &Matrix) -> f64 {
    a.dot(b)
}

pub fn is_symmetric_psd(a: &Matrix, rel_tol: f64) -> bool {
    match sym_eig(a) {
        Ok(eig) => {
            let trace = a.trace().abs().max(f64::MIN_POSITIVE);
            eig.eigenvalues.iter().all(|&l| l >= -rel_tol * trace)
        }
        Err(_) => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn random_psd(n: usize, seed: u64, lo: f64, hi: f64) -> Matrix {
        let q = qr_orthonormal(&gaussian(n, n, seed)).unwrap();
        let d = Vector::from_fn(n, |i, _| lo + (hi - lo) * i as f64 / (n - 1).max(1) as f64);
        &q * Matrix::from_diagonal(&d) * q.transpose()
    }

    #[test]
    fn identity_eig() {
        let eig = sym_eig(&Matrix::identity(2, 2)).unwrap();
        assert_eq!(eig.eigenvalues.as_slice(), &[1.0, 1.0]);
        assert_eq!(eig.eigenvectors, Matrix::identity(2, 2));
    }

    #[test]
    fn diagonal_eig_ascending() {
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![5.0, 2.0]));
        let eig = sym_eig(&a).unwrap();
        assert_eq!(eig.eigenvalues.as_slice(), &[2.0, 5.0]);
    }

    #[test]
    fn random_symmetric_reconstructs() {
        let g = gaussian(6, 6, 11);
        let a = &g + g.transpose();
        let eig = sym_eig(&a).unwrap();
        let resid = (eig.reconstruct() - &a).norm();
        assert!(resid < 1e-10 * a.norm().max(1.0), "residual {resid}");
        let ortho = (eig.eigenvectors.transpose() * &eig.eigenvectors - Matrix::identity(6, 6)).norm();
        assert!(ortho < 1e-10);
        for w in eig.eigenvalues.as_slice().windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn eig_rejects_bad_shapes() {
        assert!(matches!(sym_eig(&Matrix::zeros(2, 3)), Err(Error::Shape(_))));
        let a = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(sym_eig(&a), Err(Error::Shape(_))));
    }

    #[test]
    fn eigenvector_sign_convention() {
        let g = gaussian(5, 5, 3);
        let eig = sym_eig(&(&g * g.transpose())).unwrap();
        for col in eig.eigenvectors.column_iter() {
            let (i, _) = col.iter().enumerate().fold((0, -1.0), |acc, (i, x)| {
                if x.abs() > acc.1 {
                    (i, x.abs())
                } else {
                    acc
                }
            });
            assert!(col[i] > 0.0);
        }
    }

    #[test]
    fn svd_diagonal() {
        let g = Matrix::from_diagonal(&Vector::from_vec(vec![3.0, 2.0]));
        let s = svd(&g).unwrap();
        assert_eq!(s.sigma.as_slice(), &[3.0, 2.0]);
        assert!((s.polar() - Matrix::identity(2, 2)).norm() < 1e-15);
    }

    #[test]
    fn svd_zero() {
        let s = svd(&Matrix::zeros(3, 2)).unwrap();
        assert!(s.sigma.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn svd_rectangular_reconstructs() {
        for (r, c, seed) in [(4, 7, 1), (7, 4, 2), (16, 8, 3)] {
            let g = gaussian(r, c, seed);
            let s = svd(&g).unwrap();
            assert_eq!(s.u.shape(), (r, r.min(c)));
            assert_eq!(s.v.shape(), (c, r.min(c)));
            let resid = (s.reconstruct() - &g).norm();
            assert!(resid < 1e-10 * g.norm().max(1.0), "residual {resid}");
            for w in s.sigma.as_slice().windows(2) {
                assert!(w[0] >= w[1]);
            }
        }
    }

    #[test]
    fn svd_rejects_nan() {
        let mut g = Matrix::zeros(2, 2);
        g[(0, 1)] = f64::NAN;
        assert!(matches!(svd(&g), Err(Error::NonFinite(_))));
    }

    #[test]
    fn psd_power_cases() {
        let a = random_psd(5, 4, 0.1, 10.0);
        assert!((psd_power(&a, 1.0, 0.0).unwrap() - &a).norm() < 1e-12 * a.norm());

        let d = Matrix::from_diagonal(&Vector::from_vec(vec![16.0, 81.0]));
        let r = psd_power(&d, -0.25, 0.0).unwrap();
        let expect = Matrix::from_diagonal(&Vector::from_vec(vec![0.5, 1.0 / 3.0]));
        assert!((r - expect).norm() < 1e-15);

        let root = psd_power(&a, 0.5, 0.0).unwrap();
        let back = psd_power(&root, 2.0, 0.0).unwrap();
        assert!((back - &a).norm() < 1e-9);
    }

    #[test]
    fn psd_power_singular() {
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 0.0]));
        assert!(matches!(psd_power(&a, -0.5, 0.0), Err(Error::Singular { .. })));
        assert!(psd_power(&a, -0.5, 1e-3).is_ok());
        // Negative noise is clamped, not raised to a fractional power.
        let noisy = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, -1e-14]));
        let r = psd_power(&noisy, 0.5, 0.0).unwrap();
        assert!(r.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn psd_power_group_law() {
        for seed in 0..10 {
            let a = random_psd(6, 100 + seed, 0.1, 10.0);
            for (p, q) in [(0.5, 0.25), (-0.25, -0.25), (1.5, -0.5)] {
                let lhs = psd_power(&a, p, 0.0).unwrap() * psd_power(&a, q, 0.0).unwrap();
                let rhs = psd_power(&a, p + q, 0.0).unwrap();
                assert!((lhs - rhs).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn newton_schulz_zero_guard() {
        let z = newton_schulz_msign(&Matrix::zeros(3, 5), NS_STEPS, NS_COEFFS);
        assert_eq!(z, Matrix::zeros(3, 5));
    }

    #[test]
    fn newton_schulz_scale_invariance() {
        let m = gaussian(16, 8, 9);
        let base = newton_schulz_msign(&m, NS_STEPS, NS_COEFFS);
        // Power-of-two scalings commute exactly with the normalization.
        for c in [0.25, 2.0, 1024.0] {
            assert_eq!(newton_schulz_msign(&(&m * c), NS_STEPS, NS_COEFFS), base);
        }
        for c in [3.0, 0.1, 7.5] {
            let d = (newton_schulz_msign(&(&m * c), NS_STEPS, NS_COEFFS) - &base).norm();
            assert!(d < 1e-12, "c = {c}: {d}");
        }
    }

    #[test]
    fn newton_schulz_is_deterministic() {
        let m = gaussian(8, 12, 5);
        assert_eq!(
            newton_schulz_msign(&m, NS_STEPS, NS_COEFFS),
            newton_schulz_msign(&m, NS_STEPS, NS_COEFFS)
        );
    }

    #[test]
    fn qr_of_identity_columns() {
        let m = Matrix::identity(6, 3);
        let q = qr_orthonormal(&m).unwrap();
        assert!((q - m).norm() < 1e-15);
    }

    #[test]
    fn qr_is_idempotent() {
        let q = qr_orthonormal(&gaussian(10, 4, 2)).unwrap();
        let q2 = qr_orthonormal(&q).unwrap();
        assert!((q2 - &q).norm() < 1e-12);
    }

    #[test]
    fn qr_large_orthonormality() {
        let q = qr_orthonormal(&gaussian(3072, 256, 7)).unwrap();
        let resid = (q.transpose() * &q - Matrix::identity(256, 256)).norm();
        assert!(resid < 1e-10, "residual {resid}");
    }

    #[test]
    fn qr_rank_deficient() {
        let mut m = gaussian(5, 3, 1);
        let c0 = m.column(0).clone_owned();
        m.set_column(2, &(c0 * 2.0));
        assert!(matches!(qr_orthonormal(&m), Err(Error::Degenerate(_))));
        assert!(matches!(qr_orthonormal(&gaussian(2, 3, 1)), Err(Error::Shape(_))));
    }
}
