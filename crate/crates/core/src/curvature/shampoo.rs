//! Shampoo: left and right gradient Grams, preconditioned by damped
//! negative matrix powers `L̃ G R̃`.

use super::{debiased, ema, refresh_due, DEFAULT_REFRESH_PERIOD};
use crate::error::{Error, Result};
use crate::first_order::apply_decoupled_decay;
use crate::linalg::{psd_power, Matrix};
use crate::param::{ParamBlock, StepContext};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShampooConfig {
    pub beta2: f64,
    pub damping: f64,
    /// Root exponent; the preconditioners are `(L + λI)^(-p)` and `(R + λI)^(-p)`.
    pub exponent: f64,
    pub precond_period: u64,
    pub bias_correct: bool,
}

impl Default for ShampooConfig {
    fn default() -> Self {
        ShampooConfig {
            beta2: 0.95,
            damping: 1e-6,
            exponent: 0.25,
            precond_period: DEFAULT_REFRESH_PERIOD,
            bias_correct: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ShampooState {
    pub left: Matrix,
    pub right: Matrix,
    pub left_root: Option<Matrix>,
    pub right_root: Option<Matrix>,
    pub accumulations: u64,
}

impl ShampooState {
    pub fn new(d_out: usize, d_in: usize) -> Self {
        ShampooState {
            left: Matrix::zeros(d_out, d_out),
            right: Matrix::zeros(d_in, d_in),
            left_root: None,
            right_root: None,
            accumulations: 0,
        }
    }

    pub fn accumulate(&mut self, g: &Matrix, beta2: f64) {
        ema(&mut self.left, &(g * g.transpose()), beta2);
        ema(&mut self.right, &g.tr_mul(g), beta2);
        self.accumulations += 1;
    }
}

pub fn shampoo_update(block: &mut ParamBlock, state: &mut ShampooState, ctx: &StepContext, cfg: &ShampooConfig) -> Result<()> {
    if !block.is_matrix() {
        return Err(Error::Shape(format!("shampoo needs a matrix block, `{}` is a vector", block.id)));
    }
    state.accumulate(&block.grad, cfg.beta2);
    if refresh_due(ctx.t, cfg.precond_period, state.left_root.is_some()) {
        let n = state.accumulations;
        let roots = (|| {
            let l = debiased(&state.left, cfg.beta2, n, cfg.bias_correct);
            let r = debiased(&state.right, cfg.beta2, n, cfg.bias_correct);
            Ok::<_, Error>((psd_power(&l, -cfg.exponent, cfg.damping)?, psd_power(&r, -cfg.exponent, cfg.damping)?))
        })();
        let (l, r) = roots.map_err(|e| Error::curvature(&block.id, e))?;
        state.left_root = Some(l);
        state.right_root = Some(r);
    }
    let dir = state.left_root.as_ref().unwrap() * &block.grad * state.right_root.as_ref().unwrap();
    apply_decoupled_decay(&mut block.values, ctx);
    block.values -= dir * ctx.lr;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::svd;
    use crate::param::Role;

    fn bare() -> ShampooConfig {
        ShampooConfig {
            beta2: 0.0,
            damping: 0.0,
            exponent: 0.25,
            precond_period: 1,
            bias_correct: false,
        }
    }

    fn one_step(g: &Matrix, cfg: &ShampooConfig, lr: f64) -> Result<Matrix> {
        let (r, c) = g.shape();
        let mut block = ParamBlock::matrix("w", Role::HiddenMatrix, Matrix::zeros(r, c));
        block.set_grad(g.clone());
        shampoo_update(&mut block, &mut ShampooState::new(r, c), &StepContext::new(1, lr, 0.0), cfg)?;
        Ok(block.values)
    }

    #[test]
    fn semi_orthogonal_gradient_passes_through() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let g = Matrix::from_row_slice(2, 2, &[s, s, -s, s]);
        let w = one_step(&g, &bare(), 0.3).unwrap();
        assert!((w + g * 0.3).norm() < 1e-12);
    }

    #[test]
    fn square_gradient_is_orthogonalized() {
        let g = Matrix::from_row_slice(3, 3, &[2.0, -1.0, 0.5, 0.3, 1.5, -2.0, 1.0, 0.2, 0.7]);
        let w = one_step(&g, &bare(), 1.0).unwrap();
        assert!((w + svd(&g).unwrap().polar()).norm() < 1e-8);
    }

    #[test]
    fn heavy_damping_suppresses_update() {
        let g = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.0, 2.0]);
        let cfg = ShampooConfig {
            damping: 1e16,
            ..bare()
        };
        assert!(one_step(&g, &cfg, 1.0).unwrap().norm() < 1e-7);
    }

    #[test]
    fn rank_deficient_gram_without_damping_is_a_curvature_error() {
        let g = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.0, 2.0]);
        assert!(matches!(one_step(&g, &bare(), 1.0), Err(Error::Curvature { .. })));
    }
}
