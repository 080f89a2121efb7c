//! SOAP: RMSProp-style rescaling in the eigenbasis of Shampoo's Grams.
//!
//! The base rule has no first moment. `momentum` adds one as an extension
//! (an EMA of the rotated gradient, with Adam's bias correction).

use super::{debiased, eigenbasis, ema, refresh_due, rotate_in, rotate_out, DEFAULT_REFRESH_PERIOD};
use crate::error::{Error, Result};
use crate::first_order::{apply_decoupled_decay, ratio};
use crate::linalg::Matrix;
use crate::param::{ParamBlock, StepContext};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoapConfig {
    pub beta2: f64,
    pub eps: f64,
    pub precond_period: u64,
    pub momentum: Option<f64>,
    pub bias_correct: bool,
}

impl Default for SoapConfig {
    fn default() -> Self {
        SoapConfig {
            beta2: 0.95,
            eps: 1e-8,
            precond_period: DEFAULT_REFRESH_PERIOD,
            momentum: None,
            bias_correct: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SoapState {
    pub left: Matrix,
    pub right: Matrix,
    pub basis_left: Option<Matrix>,
    pub basis_right: Option<Matrix>,
    /// Second moment of the rotated gradient.
    pub second_moment: Matrix,
    pub first_moment: Option<Matrix>,
    pub accumulations: u64,
}

impl SoapState {
    pub fn new(d_out: usize, d_in: usize) -> Self {
        SoapState {
            left: Matrix::zeros(d_out, d_out),
            right: Matrix::zeros(d_in, d_in),
            basis_left: None,
            basis_right: None,
            second_moment: Matrix::zeros(d_out, d_in),
            first_moment: None,
            accumulations: 0,
        }
    }
}

pub(crate) fn refresh_bases(
    id: &str,
    left: &Matrix,
    right: &Matrix,
    basis_left: &mut Option<Matrix>,
    basis_right: &mut Option<Matrix>,
) -> Result<()> {
    let (ul, ur) = eigenbasis(left)
        .and_then(|ul| Ok((ul, eigenbasis(right)?)))
        .map_err(|e| Error::curvature(id, e))?;
    *basis_left = Some(ul);
    *basis_right = Some(ur);
    Ok(())
}

pub fn soap_update(block: &mut ParamBlock, state: &mut SoapState, ctx: &StepContext, cfg: &SoapConfig) -> Result<()> {
    if !block.is_matrix() {
        return Err(Error::Shape(format!("soap needs a matrix block, `{}` is a vector", block.id)));
    }
    let g = &block.grad;
    ema(&mut state.left, &(g * g.transpose()), cfg.beta2);
    ema(&mut state.right, &g.tr_mul(g), cfg.beta2);
    if refresh_due(ctx.t, cfg.precond_period, state.basis_left.is_some()) {
        refresh_bases(&block.id, &state.left, &state.right, &mut state.basis_left, &mut state.basis_right)?;
    }
    let (ul, ur) = (state.basis_left.as_ref().unwrap(), state.basis_right.as_ref().unwrap());
    let rotated = rotate_in(ul, g, ur);
    ema(&mut state.second_moment, &rotated.component_mul(&rotated), cfg.beta2);
    state.accumulations += 1;
    let n = state.accumulations;
    let v = debiased(&state.second_moment, cfg.beta2, n, cfg.bias_correct);

    let mut numer = match cfg.momentum {
        Some(beta1) => {
            let m = state.first_moment.get_or_insert_with(|| Matrix::zeros(g.nrows(), g.ncols()));
            ema(m, &rotated, beta1);
            debiased(m, beta1, n, cfg.bias_correct)
        }
        None => rotated,
    };
    numer.zip_apply(&v, |x, v| *x = ratio(*x, v.sqrt() + cfg.eps));
    let dir = rotate_out(ul, &numer, ur);
    apply_decoupled_decay(&mut block.values, ctx);
    block.values -= dir * ctx.lr;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::first_order::{rmsprop_step, RmsPropConfig, RmsPropState};
    use crate::param::Role;

    #[test]
    fn diagonal_grams_reduce_to_rmsprop() {
        // Diagonal gradients with a fixed ordering keep both Grams diagonal
        // with ascending entries, so both bases are the identity.
        let cfg = SoapConfig {
            beta2: 0.9,
            eps: 1e-8,
            precond_period: 1,
            momentum: None,
            bias_correct: false,
        };
        let rms = RmsPropConfig { beta2: 0.9, eps: 1e-8 };
        let mut a = ParamBlock::matrix("w", Role::HiddenMatrix, Matrix::from_element(2, 2, 1.0));
        let mut b = a.clone();
        let mut soap = SoapState::new(2, 2);
        let mut rs = RmsPropState::default();
        for t in 1..=4u64 {
            let x = t as f64;
            let g = Matrix::from_row_slice(2, 2, &[x, 0.0, 0.0, 5.0 + x]);
            a.set_grad(g.clone());
            b.set_grad(g);
            let ctx = StepContext::new(t, 0.01, 0.0);
            soap_update(&mut a, &mut soap, &ctx, &cfg).unwrap();
            rmsprop_step(&mut b, &mut rs, &ctx, &rms);
            assert!((&a.values - &b.values).norm() < 1e-12, "step {t}");
        }
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut block = ParamBlock::matrix("w", Role::HiddenMatrix, Matrix::from_element(2, 3, 0.5));
        let mut st = SoapState::new(2, 3);
        st.second_moment.fill(2.0);
        soap_update(&mut block, &mut st, &StepContext::new(1, 0.1, 0.0), &SoapConfig::default()).unwrap();
        assert_eq!(block.values, Matrix::from_element(2, 3, 0.5));
        assert!((st.second_moment[(0, 0)] - 0.95 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn fresh_step_is_sign_descent_in_eigenbasis() {
        let cfg = SoapConfig {
            beta2: 0.0,
            eps: 0.0,
            ..SoapConfig::default()
        };
        let g = Matrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.25, -1.0]);
        let mut block = ParamBlock::matrix("w", Role::HiddenMatrix, Matrix::zeros(2, 3));
        block.set_grad(g);
        let mut st = SoapState::new(2, 3);
        soap_update(&mut block, &mut st, &StepContext::new(1, 0.1, 0.0), &cfg).unwrap();
        let rotated = rotate_in(st.basis_left.as_ref().unwrap(), &block.values, st.basis_right.as_ref().unwrap());
        let nonzero = rotated.iter().filter(|x| x.abs() > 1e-9).count();
        assert!(nonzero > 0);
        for x in rotated.iter().filter(|x| x.abs() > 1e-9) {
            assert!((x.abs() - 0.1).abs() < 1e-12);
        }
        assert!((rotated.amax() - 0.1).abs() < 1e-12);
    }
}
