//! Kronecker-factored, eigenbasis, orthogonalized and diagonal-Hessian
//! optimizers.
//!
//! Covariance buffers start at zero and are updated as exponential moving
//! averages. Unless `bias_correct` is switched off, the factor estimates are
//! divided by `1 - β₂ⁿ` (with `n` the number of accumulations) before they
//! are inverted, rooted or used as second moments. Cached preconditioners
//! are recomputed on the first step and whenever `t` is a multiple of the
//! refresh period.

pub mod ekfac;
pub mod kfac;
pub mod muon;
pub mod shampoo;
pub mod soap;
pub mod sophia;
pub mod splus;

pub use ekfac::{ekfac_update, EkfacConfig, EkfacState};
pub use kfac::{kfac_direction, kfac_update, KfacConfig, KfacState};
pub use muon::{muon_update, MuonConfig, MuonState};
pub use shampoo::{shampoo_update, ShampooConfig, ShampooState};
pub use soap::{soap_update, SoapConfig, SoapState};
pub use sophia::{sophia_direction, sophia_update, HessianEstimator, SophiaConfig, SophiaState};
pub use splus::{splus_update, SplusConfig, SplusState};

use crate::linalg::{sym_eig, Matrix};

pub const DEFAULT_REFRESH_PERIOD: u64 = 20;

pub(crate) fn refresh_due(t: u64, period: u64, initialized: bool) -> bool {
    !initialized || t % period.max(1) == 0
}

/// `acc <- β acc + (1 - β) sample`.
pub(crate) fn ema(acc: &mut Matrix, sample: &Matrix, beta: f64) {
    acc.zip_apply(sample, |a, s| *a = beta * *a + (1.0 - beta) * s);
}

/// Divides a zero-initialised EMA by `1 - βⁿ`.
pub(crate) fn debiased(acc: &Matrix, beta: f64, n: u64, enabled: bool) -> Matrix {
    let c = 1.0 - beta.powi(n.min(i32::MAX as u64) as i32);
    if enabled && c > 0.0 {
        acc / c
    } else {
        acc.clone()
    }
}

/// Mean outer product of the rows of `x` (`xᵀx / rows`).
pub(crate) fn row_second_moment(x: &Matrix) -> Matrix {
    x.tr_mul(x) / x.nrows() as f64
}

pub(crate) fn eigenbasis(m: &Matrix) -> crate::error::Result<Matrix> {
    Ok(sym_eig(m)?.eigenvectors)
}

/// `Uₗᵀ G Uᵣ`.
pub(crate) fn rotate_in(left: &Matrix, g: &Matrix, right: &Matrix) -> Matrix {
    left.tr_mul(g) * right
}

/// `Uₗ G Uᵣᵀ`.
pub(crate) fn rotate_out(left: &Matrix, g: &Matrix, right: &Matrix) -> Matrix {
    left * g * right.transpose()
}
