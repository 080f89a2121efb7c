//! Muon: Nesterov momentum followed by Newton-Schulz orthogonalization.

use crate::error::{Error, Result};
use crate::first_order::apply_decoupled_decay;
use crate::linalg::{newton_schulz_msign, Matrix, NS_COEFFS, NS_STEPS};
use crate::param::{ParamBlock, StepContext};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuonConfig {
    pub beta1: f64,
    pub ns_steps: usize,
    pub coeffs: (f64, f64, f64),
}

impl Default for MuonConfig {
    fn default() -> Self {
        MuonConfig {
            beta1: 0.95,
            ns_steps: NS_STEPS,
            coeffs: NS_COEFFS,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MuonState {
    pub momentum: Option<Matrix>,
}

/// Momentum update and Nesterov look-ahead: returns `M_t + β (M_t - M_{t-1})`.
pub fn muon_lookahead(state: &mut MuonState, g: &Matrix, beta1: f64) -> Matrix {
    let prev = state
        .momentum
        .take()
        .unwrap_or_else(|| Matrix::zeros(g.nrows(), g.ncols()));
    let m = &prev * beta1 + g;
    let look = &m + (&m - &prev) * beta1;
    state.momentum = Some(m);
    look
}

pub fn muon_update(block: &mut ParamBlock, state: &mut MuonState, ctx: &StepContext, cfg: &MuonConfig) -> Result<()> {
    if !block.is_matrix() {
        return Err(Error::Shape(format!("muon needs a matrix block, `{}` is a vector", block.id)));
    }
    let look = muon_lookahead(state, &block.grad, cfg.beta1);
    let dir = newton_schulz_msign(&look, cfg.ns_steps, cfg.coeffs);
    apply_decoupled_decay(&mut block.values, ctx);
    block.values -= dir * ctx.lr;
    Ok(())
}
