//! Sophia: gradient EMA divided by an infrequently refreshed diagonal
//! Hessian EMA, clipped entrywise.

use crate::error::{Error, Result};
use crate::first_order::apply_decoupled_decay;
use crate::linalg::Matrix;
use crate::param::{ParamBlock, StepContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianEstimator {
    Hutchinson,
    GaussNewtonBartlett,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SophiaConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    /// A fresh Hessian estimate is required when `t` is a multiple of this.
    pub hessian_period: u64,
    pub estimator: HessianEstimator,
}

impl Default for SophiaConfig {
    fn default() -> Self {
        SophiaConfig {
            beta1: 0.965,
            beta2: 0.99,
            eps: 1e-12,
            clip: 1.0,
            hessian_period: 10,
            estimator: HessianEstimator::GaussNewtonBartlett,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SophiaState {
    pub m: Vec<Matrix>,
    pub h: Vec<Matrix>,
}

impl SophiaConfig {
    pub fn needs_hessian(&self, t: u64) -> bool {
        t % self.hessian_period.max(1) == 0
    }
}

/// `clip(m / max(h, ε), ρ)` entrywise.
pub fn sophia_direction(m: &Matrix, h: &Matrix, eps: f64, clip: f64) -> Matrix {
    m.zip_map(h, |m, h| (m / h.max(eps)).clamp(-clip, clip))
}

/// Steps all blocks. `hessian` holds one diagonal estimate per block and is
/// required on refresh steps; estimates passed on other steps are also
/// folded in.
pub fn sophia_update(
    blocks: &mut [ParamBlock],
    state: &mut SophiaState,
    ctx: &StepContext,
    cfg: &SophiaConfig,
    hessian: Option<&[Matrix]>,
) -> Result<()> {
    if cfg.needs_hessian(ctx.t) && hessian.is_none() {
        return Err(Error::Config(format!("sophia needs a Hessian estimate at step {}", ctx.t)));
    }
    if let Some(hs) = hessian {
        if hs.len() != blocks.len() || hs.iter().zip(blocks.iter()).any(|(h, b)| h.shape() != b.values.shape()) {
            return Err(Error::Shape("Hessian estimate does not match the blocks".into()));
        }
    }
    if state.m.is_empty() {
        state.m = blocks.iter().map(|b| Matrix::zeros(b.grad.nrows(), b.grad.ncols())).collect();
        state.h = state.m.clone();
    }
    for (i, b) in blocks.iter_mut().enumerate() {
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        state.m[i].zip_apply(&b.grad, |m, g| *m = b1 * *m + (1.0 - b1) * g);
        if let Some(hs) = hessian {
            state.h[i].zip_apply(&hs[i], |h, e| *h = b2 * *h + (1.0 - b2) * e);
        }
        let dir = sophia_direction(&state.m[i], &state.h[i], cfg.eps, cfg.clip);
        apply_decoupled_decay(&mut b.values, ctx);
        b.values -= dir * ctx.lr;
    }
    Ok(())
}
