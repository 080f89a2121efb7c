//! SPlus: Shampoo eigenbases with the rotated gradient normalized to unit
//! Frobenius norm, a shape-dependent step scale, and an iterate average used
//! for evaluation.

use super::soap::refresh_bases;
use super::{ema, refresh_due, rotate_in, rotate_out, DEFAULT_REFRESH_PERIOD};
use crate::error::{Error, Result};
use crate::first_order::apply_decoupled_decay;
use crate::linalg::Matrix;
use crate::param::{ParamBlock, StepContext};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplusConfig {
    pub beta2: f64,
    pub precond_period: u64,
    /// Decay of the iterate average.
    pub averaging: f64,
}

impl Default for SplusConfig {
    fn default() -> Self {
        SplusConfig {
            beta2: 0.95,
            precond_period: DEFAULT_REFRESH_PERIOD,
            averaging: 0.99,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplusState {
    pub left: Matrix,
    pub right: Matrix,
    pub basis_left: Option<Matrix>,
    pub basis_right: Option<Matrix>,
    /// Iterate average, seeded with the weights seen on the first step.
    pub average: Option<Matrix>,
}

impl SplusState {
    pub fn new(d_out: usize, d_in: usize) -> Self {
        SplusState {
            left: Matrix::zeros(d_out, d_out),
            right: Matrix::zeros(d_in, d_in),
            basis_left: None,
            basis_right: None,
            average: None,
        }
    }
}

/// `η √(d_out / d_in)`.
pub fn effective_lr(lr: f64, d_out: usize, d_in: usize) -> f64 {
    lr * (d_out as f64 / d_in as f64).sqrt()
}

pub fn splus_update(block: &mut ParamBlock, state: &mut SplusState, ctx: &StepContext, cfg: &SplusConfig) -> Result<()> {
    if !block.is_matrix() {
        return Err(Error::Shape(format!("splus needs a matrix block, `{}` is a vector", block.id)));
    }
    let average = state.average.get_or_insert_with(|| block.values.clone());
    let g = &block.grad;
    ema(&mut state.left, &(g * g.transpose()), cfg.beta2);
    ema(&mut state.right, &g.tr_mul(g), cfg.beta2);
    if refresh_due(ctx.t, cfg.precond_period, state.basis_left.is_some()) {
        refresh_bases(&block.id, &state.left, &state.right, &mut state.basis_left, &mut state.basis_right)?;
    }
    let (ul, ur) = (state.basis_left.as_ref().unwrap(), state.basis_right.as_ref().unwrap());
    let rotated = rotate_in(ul, g, ur);
    let norm = rotated.norm();
    apply_decoupled_decay(&mut block.values, ctx);
    if norm > 0.0 {
        let (d_out, d_in) = g.shape();
        let dir = rotate_out(ul, &(rotated / norm), ur);
        block.values -= dir * effective_lr(ctx.lr, d_out, d_in);
    }
    ema(average, &block.values, cfg.averaging);
    Ok(())
}
