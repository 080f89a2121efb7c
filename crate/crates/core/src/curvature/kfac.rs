//! Kronecker-factored approximate curvature.
//!
//! A layer's Fisher block is approximated by `A ⊗ S`, with `A` the second
//! moment of the layer inputs (homogeneous coordinate included) and `S` the
//! second moment of the pre-activation gradients. The update is
//! `S̃⁻¹ G Ã⁻¹` with factored Tikhonov damping `Ã = A + π_A λ I`,
//! `S̃ = S + π_S λ I`.

use super::{debiased, ema, refresh_due, row_second_moment, DEFAULT_REFRESH_PERIOD};
use crate::error::{Error, Result};
use crate::first_order::apply_decoupled_decay;
use crate::linalg::{psd_power, Matrix};
use crate::param::{ParamBlock, StepContext};
use crate::problems::mlp::LayerCache;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KfacConfig {
    pub beta2: f64,
    pub damping: f64,
    pi_a: f64,
    pi_s: f64,
    pub inverse_period: u64,
    pub bias_correct: bool,
}

impl Default for KfacConfig {
    fn default() -> Self {
        KfacConfig {
            beta2: 0.95,
            damping: 1e-3,
            pi_a: 1.0,
            pi_s: 1.0,
            inverse_period: DEFAULT_REFRESH_PERIOD,
            bias_correct: true,
        }
    }
}

impl KfacConfig {
    pub fn new(beta2: f64, damping: f64, inverse_period: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta2) || !(damping >= 0.0) || inverse_period == 0 {
            return Err(Error::Config(format!(
                "kfac needs 0 <= beta2 < 1, damping >= 0, period >= 1 (got {beta2}, {damping}, {inverse_period})"
            )));
        }
        Ok(KfacConfig {
            beta2,
            damping,
            inverse_period,
            ..KfacConfig::default()
        })
    }

    /// Splits the damping between the two factors. The product of the two
    /// weights must be one.
    pub fn with_factored_damping(mut self, pi_a: f64, pi_s: f64) -> Result<Self> {
        if !(pi_a > 0.0 && pi_s > 0.0) || (pi_a * pi_s - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "damping split must satisfy pi_a * pi_s = 1 (got {pi_a} * {pi_s})"
            )));
        }
        self.pi_a = pi_a;
        self.pi_s = pi_s;
        Ok(self)
    }

    pub fn pi_a(&self) -> f64 {
        self.pi_a
    }

    pub fn pi_s(&self) -> f64 {
        self.pi_s
    }
}

#[derive(Debug, Clone)]
pub struct KfacState {
    pub a: Matrix,
    pub s: Matrix,
    pub a_inv: Option<Matrix>,
    pub s_inv: Option<Matrix>,
    pub accumulations: u64,
}

impl KfacState {
    /// Zero factors for a `d_out x d_in_h` layer, where `d_in_h` already
    /// counts the homogeneous coordinate.
    pub fn new(d_out: usize, d_in_h: usize) -> Self {
        KfacState {
            a: Matrix::zeros(d_in_h, d_in_h),
            s: Matrix::zeros(d_out, d_out),
            a_inv: None,
            s_inv: None,
            accumulations: 0,
        }
    }

    fn accumulate(&mut self, layer: &LayerCache, beta2: f64) {
        ema(&mut self.a, &row_second_moment(&layer.a_bar), beta2);
        ema(&mut self.s, &row_second_moment(&layer.delta), beta2);
        self.accumulations += 1;
    }

    /// Recomputes both damped inverses from the current factors.
    pub fn refresh(&mut self, cfg: &KfacConfig) -> Result<()> {
        let a = debiased(&self.a, cfg.beta2, self.accumulations, cfg.bias_correct);
        let s = debiased(&self.s, cfg.beta2, self.accumulations, cfg.bias_correct);
        self.a_inv = Some(psd_power(&a, -1.0, cfg.pi_a * cfg.damping)?);
        self.s_inv = Some(psd_power(&s, -1.0, cfg.pi_s * cfg.damping)?);
        Ok(())
    }
}

/// `S̃⁻¹ G Ã⁻¹`.
pub fn kfac_direction(g: &Matrix, s_inv: &Matrix, a_inv: &Matrix) -> Matrix {
    s_inv * g * a_inv
}

pub(crate) fn check_cache(block: &ParamBlock, layer: &LayerCache) -> Result<()> {
    let (d_out, d_in) = block.values.shape();
    if layer.a_bar.ncols() != d_in || layer.delta.ncols() != d_out || layer.a_bar.nrows() != layer.delta.nrows() {
        return Err(Error::Shape(format!(
            "cache for `{}` has activities {:?} and signals {:?}, block is {d_out}x{d_in}",
            block.id,
            layer.a_bar.shape(),
            layer.delta.shape()
        )));
    }
    Ok(())
}

pub fn kfac_update(
    block: &mut ParamBlock,
    state: &mut KfacState,
    layer: &LayerCache,
    ctx: &StepContext,
    cfg: &KfacConfig,
) -> Result<()> {
    check_cache(block, layer)?;
    state.accumulate(layer, cfg.beta2);
    if refresh_due(ctx.t, cfg.inverse_period, state.a_inv.is_some()) {
        state.refresh(cfg).map_err(|e| Error::curvature(&block.id, e))?;
    }
    let dir = kfac_direction(
        &block.grad,
        state.s_inv.as_ref().expect("refreshed above"),
        state.a_inv.as_ref().expect("refreshed above"),
    );
    apply_decoupled_decay(&mut block.values, ctx);
    block.values -= dir * ctx.lr;
    Ok(())
}
