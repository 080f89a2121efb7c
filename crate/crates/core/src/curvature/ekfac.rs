//! Eigenvalue-corrected KFAC: the Kronecker eigenbasis is refreshed
//! periodically while a diagonal second moment in that basis is tracked
//! every step.
//!
//! The rescaling is `G̃ / (s* + λ)` with `s*` the raw second moment of the
//! rotated gradient, so a coordinate with steady gradient `c` moves by
//! about `1/c` (not `sign(c)`).

use super::kfac::check_cache;
use super::{debiased, eigenbasis, ema, refresh_due, rotate_in, rotate_out, row_second_moment, DEFAULT_REFRESH_PERIOD};
use crate::error::{Error, Result};
use crate::first_order::{apply_decoupled_decay, ratio};
use crate::linalg::Matrix;
use crate::param::{ParamBlock, StepContext};
use crate::problems::mlp::LayerCache;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfacConfig {
    pub beta2: f64,
    pub damping: f64,
    pub eigen_period: u64,
    pub bias_correct: bool,
}

impl Default for EkfacConfig {
    fn default() -> Self {
        EkfacConfig {
            beta2: 0.95,
            damping: 1e-3,
            eigen_period: DEFAULT_REFRESH_PERIOD,
            bias_correct: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EkfacState {
    pub a: Matrix,
    pub s: Matrix,
    pub basis_a: Option<Matrix>,
    pub basis_s: Option<Matrix>,
    /// Second moment of the rotated gradient, `d_out x d_in_h`.
    pub second_moment: Matrix,
    pub accumulations: u64,
}

impl EkfacState {
    pub fn new(d_out: usize, d_in_h: usize) -> Self {
        EkfacState {
            a: Matrix::zeros(d_in_h, d_in_h),
            s: Matrix::zeros(d_out, d_out),
            basis_a: None,
            basis_s: None,
            second_moment: Matrix::zeros(d_out, d_in_h),
            accumulations: 0,
        }
    }

    /// Bias-corrected `s*` as used by the update.
    pub fn scaling(&self, cfg: &EkfacConfig) -> Matrix {
        debiased(&self.second_moment, cfg.beta2, self.accumulations, cfg.bias_correct)
    }
}

/// `U_S (G̃ / (s* + λ)) U_Aᵀ` with `G̃ = U_Sᵀ G U_A`.
pub fn ekfac_direction(g: &Matrix, basis_s: &Matrix, basis_a: &Matrix, scaling: &Matrix, damping: f64) -> Matrix {
    let mut rotated = rotate_in(basis_s, g, basis_a);
    rotated.zip_apply(scaling, |x, s| *x = ratio(*x, s + damping));
    rotate_out(basis_s, &rotated, basis_a)
}

pub fn ekfac_update(
    block: &mut ParamBlock,
    state: &mut EkfacState,
    layer: &LayerCache,
    ctx: &StepContext,
    cfg: &EkfacConfig,
) -> Result<()> {
    check_cache(block, layer)?;
    ema(&mut state.a, &row_second_moment(&layer.a_bar), cfg.beta2);
    ema(&mut state.s, &row_second_moment(&layer.delta), cfg.beta2);
    if refresh_due(ctx.t, cfg.eigen_period, state.basis_a.is_some()) {
        let refreshed = eigenbasis(&state.a).and_then(|ua| Ok((ua, eigenbasis(&state.s)?)));
        let (ua, us) = refreshed.map_err(|e| Error::curvature(&block.id, e))?;
        state.basis_a = Some(ua);
        state.basis_s = Some(us);
    }
    let (ua, us) = (state.basis_a.as_ref().unwrap(), state.basis_s.as_ref().unwrap());
    let rotated = rotate_in(us, &block.grad, ua);
    ema(&mut state.second_moment, &rotated.component_mul(&rotated), cfg.beta2);
    state.accumulations += 1;
    let dir = ekfac_direction(&block.grad, us, ua, &state.scaling(cfg), cfg.damping);
    apply_decoupled_decay(&mut block.values, ctx);
    block.values -= dir * ctx.lr;
    Ok(())
}
