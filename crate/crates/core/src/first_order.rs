//! Classical and adaptive first-order update rules.
//!
//! Every rule takes its learning rate and weight-decay coefficient from the
//! [`StepContext`]. Weight decay is applied in decoupled form,
//! `w <- (1 - η λ) w`, before the rule's own update unless the rule says
//! otherwise (Adam's coupled mode, dual averaging).

use crate::linalg::Matrix;
use crate::param::{ParamBlock, StepContext};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

pub(crate) fn apply_decoupled_decay(values: &mut Matrix, ctx: &StepContext) {
    if ctx.wd != 0.0 {
        *values *= 1.0 - ctx.lr * ctx.wd;
    }
}

/// `num / den` that maps `0 / 0` to zero so untouched coordinates stay put.
#[inline]
pub(crate) fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Sign with `sign(0) = 0`.
#[inline]
pub fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SgdVariant {
    #[default]
    Plain,
    HeavyBall,
    Nesterov,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub variant: SgdVariant,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            variant: SgdVariant::Plain,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SgdState {
    /// Previous iterate for heavy ball.
    pub prev: Option<Matrix>,
    /// Velocity `u` for Nesterov.
    pub velocity: Option<Matrix>,
}

/// Plain, heavy-ball or Nesterov SGD.
///
/// Nesterov uses the single-gradient reformulation: the stored weights are
/// the look-ahead point `y = w + η ρ u`, the gradient is taken there, and
/// `u <- ρ u - g`, `y <- y + η (ρ u - g)`.
pub fn sgd_step(block: &mut ParamBlock, state: &mut SgdState, ctx: &StepContext, cfg: &SgdConfig) {
    let lr = ctx.lr;
    match cfg.variant {
        SgdVariant::Plain => {
            apply_decoupled_decay(&mut block.values, ctx);
            block.values -= &block.grad * lr;
        }
        SgdVariant::HeavyBall => {
            let current = block.values.clone();
            let prev = state.prev.take().unwrap_or_else(|| current.clone());
            let velocity = &current - &prev;
            apply_decoupled_decay(&mut block.values, ctx);
            block.values -= &block.grad * lr;
            block.values += &velocity * cfg.momentum;
            state.prev = Some(current);
        }
        SgdVariant::Nesterov => {
            let (r, c) = block.values.shape();
            let u = state.velocity.get_or_insert_with(|| Matrix::zeros(r, c));
            *u *= cfg.momentum;
            *u -= &block.grad;
            let dir = &*u * cfg.momentum - &block.grad;
            apply_decoupled_decay(&mut block.values, ctx);
            block.values += &dir * lr;
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DualAveragingState {
    pub avg_grad: Option<Matrix>,
    pub count: u64,
}

/// Dual averaging with the `½‖w‖²` regularizer: `w = -α_t ḡ_t` where `α_t`
/// is the context learning rate.
pub fn dual_averaging_step(block: &mut ParamBlock, state: &mut DualAveragingState, ctx: &StepContext) {
    let n = state.count + 1;
    let avg = match state.avg_grad.take() {
        None => block.grad.clone(),
        Some(prev) => (prev * (n - 1) as f64 + &block.grad) / n as f64,
    };
    block.values = &avg * -ctx.lr;
    state.avg_grad = Some(avg);
    state.count = n;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaGradConfig {
    pub eps: f64,
}

impl Default for AdaGradConfig {
    fn default() -> Self {
        AdaGradConfig { eps: 1e-10 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdaGradState {
    pub sum_sq: Option<Matrix>,
}

pub fn adagrad_step(block: &mut ParamBlock, state: &mut AdaGradState, ctx: &StepContext, cfg: &AdaGradConfig) {
    let (r, c) = block.values.shape();
    let acc = state.sum_sq.get_or_insert_with(|| Matrix::zeros(r, c));
    acc.zip_apply(&block.grad, |v, g| *v += g * g);
    apply_decoupled_decay(&mut block.values, ctx);
    let lr = ctx.lr;
    block
        .values
        .zip_zip_apply(&block.grad, acc, |w, g, v| *w -= lr * ratio(g, (v + cfg.eps).sqrt()));
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsPropConfig {
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            beta2: 0.99,
            eps: DEFAULT_EPS,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RmsPropState {
    pub second: Option<Matrix>,
}

pub fn rmsprop_step(block: &mut ParamBlock, state: &mut RmsPropState, ctx: &StepContext, cfg: &RmsPropConfig) {
    let (r, c) = block.values.shape();
    let v = state.second.get_or_insert_with(|| Matrix::zeros(r, c));
    let b2 = cfg.beta2;
    v.zip_apply(&block.grad, |v, g| *v = b2 * *v + (1.0 - b2) * g * g);
    apply_decoupled_decay(&mut block.values, ctx);
    let lr = ctx.lr;
    block
        .values
        .zip_zip_apply(&block.grad, v, |w, g, v| *w -= lr * ratio(g, v.sqrt() + cfg.eps));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecayMode {
    None,
    CoupledL2,
    #[default]
    Decoupled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: DecayMode,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            decay: DecayMode::Decoupled,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: Option<Matrix>,
    pub v: Option<Matrix>,
}

/// Adam / AdamW with bias-corrected moments.
pub fn adam_step(block: &mut ParamBlock, state: &mut AdamState, ctx: &StepContext, cfg: &AdamConfig) {
    let (r, c) = block.values.shape();
    let grad = match cfg.decay {
        DecayMode::CoupledL2 if ctx.wd != 0.0 => &block.grad + &block.values * ctx.wd,
        _ => block.grad.clone(),
    };
    let m = state.m.get_or_insert_with(|| Matrix::zeros(r, c));
    let v = state.v.get_or_insert_with(|| Matrix::zeros(r, c));
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    m.zip_apply(&grad, |m, g| *m = b1 * *m + (1.0 - b1) * g);
    v.zip_apply(&grad, |v, g| *v = b2 * *v + (1.0 - b2) * g * g);

    if cfg.decay == DecayMode::Decoupled {
        apply_decoupled_decay(&mut block.values, ctx);
    }
    let t = ctx.t as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (lr, eps) = (ctx.lr, cfg.eps);
    block.values.zip_zip_apply(m, v, |w, m, v| {
        let m_hat = m / c1;
        let v_hat = v / c2;
        *w -= lr * ratio(m_hat, v_hat.sqrt() + eps);
    });
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignSgdConfig {
    pub beta1: f64,
}

impl Default for SignSgdConfig {
    fn default() -> Self {
        SignSgdConfig { beta1: DEFAULT_BETA1 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SignSgdState {
    pub m: Option<Matrix>,
}

pub fn signsgd_step(block: &mut ParamBlock, state: &mut SignSgdState, ctx: &StepContext, cfg: &SignSgdConfig) {
    let (r, c) = block.values.shape();
    let m = state.m.get_or_insert_with(|| Matrix::zeros(r, c));
    let b1 = cfg.beta1;
    m.zip_apply(&block.grad, |m, g| *m = b1 * *m + (1.0 - b1) * g);
    apply_decoupled_decay(&mut block.values, ctx);
    // The bias-correction factor is positive, so it never changes the sign.
    let lr = ctx.lr;
    block.values.zip_apply(m, |w, m| *w -= lr * sign0(m));
}

pub const PRODIGY_INITIAL_STEP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ProdigyState {
    /// Automatically grown step size.
    pub eta: f64,
    /// Snapshot of the weights at the first step.
    pub origin: Option<Vec<Matrix>>,
}

impl Default for ProdigyState {
    fn default() -> Self {
        ProdigyState {
            eta: PRODIGY_INITIAL_STEP,
            origin: None,
        }
    }
}

impl ProdigyState {
    pub fn with_initial_step(eta0: f64) -> Self {
        ProdigyState { eta: eta0, origin: None }
    }
}

/// Sign descent with the escape-velocity step size, over all blocks jointly.
///
/// Weights move with the current step size `η_t`; the grown value
/// `max(η_t, gᵀ(w₀ - w_t) / ‖g‖₁)` is used from the next step on. The
/// context learning rate multiplies the step (1 reproduces the bare rule).
pub fn prodigy_step(blocks: &mut [ParamBlock], state: &mut ProdigyState, ctx: &StepContext) {
    let origin = state
        .origin
        .get_or_insert_with(|| blocks.iter().map(|b| b.values.clone()).collect());
    let mut l1 = 0.0;
    let mut directional = 0.0;
    for (b, w0) in blocks.iter().zip(origin.iter()) {
        l1 += b.grad.iter().map(|g| g.abs()).sum::<f64>();
        directional += b.grad.dot(&(w0 - &b.values));
    }
    if l1 == 0.0 {
        return;
    }
    let step = ctx.lr * state.eta;
    for b in blocks.iter_mut() {
        apply_decoupled_decay(&mut b.values, ctx);
        b.values.zip_apply(&b.grad, |w, g| *w -= step * sign0(g));
    }
    state.eta = state.eta.max(directional / l1);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Vector;
    use crate::param::Role;

    fn scalar(w: f64) -> ParamBlock {
        ParamBlock::vector("w", Role::BiasVector, Vector::from_vec(vec![w]))
    }

    fn vec_block(ws: &[f64]) -> ParamBlock {
        ParamBlock::vector("w", Role::BiasVector, Vector::from_vec(ws.to_vec()))
    }

    fn grad(b: &mut ParamBlock, g: &[f64]) {
        b.set_grad(Matrix::from_column_slice(g.len(), 1, g));
    }

    fn ctx(t: u64, lr: f64) -> StepContext {
        StepContext::new(t, lr, 0.0)
    }

    #[test]
    fn plain_sgd_arithmetic() {
        let mut b = scalar(1.0);
        grad(&mut b, &[0.5]);
        sgd_step(&mut b, &mut SgdState::default(), &ctx(1, 0.1), &SgdConfig::default());
        assert!((b.values[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_no_decay_is_identity() {
        let mut b = vec_block(&[1.0, -2.0]);
        let before = b.values.clone();
        sgd_step(&mut b, &mut SgdState::default(), &ctx(1, 0.1), &SgdConfig::default());
        assert_eq!(b.values, before);
    }

    #[test]
    fn heavy_ball_from_rest_with_zero_gradient() {
        let cfg = SgdConfig {
            momentum: 0.9,
            variant: SgdVariant::HeavyBall,
        };
        let mut b = scalar(3.0);
        let mut s = SgdState::default();
        for t in 1..4 {
            sgd_step(&mut b, &mut s, &ctx(t, 0.1), &cfg);
        }
        assert_eq!(b.values[0], 3.0);
    }

    #[test]
    fn heavy_ball_recurrence() {
        // w1 = 0 - 0.1 = -0.1; w2 = -0.1 - 0.1 + 0.9 * (-0.1) = -0.29
        let cfg = SgdConfig {
            momentum: 0.9,
            variant: SgdVariant::HeavyBall,
        };
        let mut b = scalar(0.0);
        let mut s = SgdState::default();
        grad(&mut b, &[1.0]);
        sgd_step(&mut b, &mut s, &ctx(1, 0.1), &cfg);
        assert!((b.values[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut b, &mut s, &ctx(2, 0.1), &cfg);
        assert!((b.values[0] + 0.29).abs() < 1e-15);
    }

    /// The look-ahead recurrence u' = ρu − ∇f(w + ηρu), w' = w + ηu' and the
    /// stored-look-ahead reformulation agree on a quadratic: y_t = w_t + ηρu_t.
    #[test]
    fn nesterov_matches_lookahead_form_on_quadratic() {
        let h = [2.0, 0.3, 5.0];
        let grad_at = |x: &[f64]| -> Vec<f64> { x.iter().zip(h).map(|(x, h)| h * x).collect() };
        let (lr, rho) = (0.05, 0.8);
        let w0 = [1.0, -2.0, 0.5];

        let mut w = w0.to_vec();
        let mut u = vec![0.0; 3];
        let mut reference = Vec::new();
        for _ in 0..50 {
            let look: Vec<f64> = w.iter().zip(&u).map(|(w, u)| w + lr * rho * u).collect();
            let g = grad_at(&look);
            for i in 0..3 {
                u[i] = rho * u[i] - g[i];
                w[i] += lr * u[i];
            }
            reference.push(w.iter().zip(&u).map(|(w, u)| w + lr * rho * u).collect::<Vec<_>>());
        }

        let cfg = SgdConfig {
            momentum: rho,
            variant: SgdVariant::Nesterov,
        };
        let mut b = vec_block(&w0);
        let mut s = SgdState::default();
        for (t, expect) in reference.iter().enumerate() {
            let g = grad_at(b.values.as_slice());
            grad(&mut b, &g);
            sgd_step(&mut b, &mut s, &ctx(t as u64 + 1, lr), &cfg);
            for i in 0..3 {
                assert!((b.values[i] - expect[i]).abs() < 1e-12, "step {t}");
            }
        }
    }

    #[test]
    fn dual_averaging_cases() {
        let mut b = scalar(0.0);
        let mut s = DualAveragingState::default();
        grad(&mut b, &[2.0]);
        dual_averaging_step(&mut b, &mut s, &ctx(1, 0.5));
        assert_eq!(b.values[0], -1.0);

        let mut b = scalar(0.0);
        let mut s = DualAveragingState::default();
        grad(&mut b, &[1.0]);
        dual_averaging_step(&mut b, &mut s, &ctx(1, 1.0));
        grad(&mut b, &[3.0]);
        dual_averaging_step(&mut b, &mut s, &ctx(2, 1.0));
        assert_eq!(s.avg_grad.as_ref().unwrap()[0], 2.0);
        assert_eq!(b.values[0], -2.0);

        let mut b = vec_block(&[4.0, 4.0]);
        let mut s = DualAveragingState::default();
        dual_averaging_step(&mut b, &mut s, &ctx(1, 1.0));
        assert!(b.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dual_averaging_constant_gradient_fixed_point() {
        let mut b = vec_block(&[0.0, 0.0]);
        let mut s = DualAveragingState::default();
        for t in 1..20 {
            grad(&mut b, &[0.7, -1.3]);
            dual_averaging_step(&mut b, &mut s, &ctx(t, 0.4));
            assert!((b.values[0] + 0.4 * 0.7).abs() < 1e-15);
            assert!((b.values[1] - 0.4 * 1.3).abs() < 1e-15);
        }
    }

    #[test]
    fn adagrad_cases() {
        let cfg = AdaGradConfig { eps: 0.0 };
        let mut b = scalar(0.0);
        let mut s = AdaGradState::default();
        grad(&mut b, &[3.0]);
        adagrad_step(&mut b, &mut s, &ctx(1, 1.0), &cfg);
        assert_eq!(b.values[0], -1.0);

        let mut b = scalar(0.0);
        let mut s = AdaGradState::default();
        grad(&mut b, &[1.0]);
        adagrad_step(&mut b, &mut s, &ctx(1, 1.0), &cfg);
        adagrad_step(&mut b, &mut s, &ctx(2, 1.0), &cfg);
        assert!((b.values[0] - (-1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-15);

        let mut b = scalar(1.0);
        let mut s = AdaGradState::default();
        adagrad_step(&mut b, &mut s, &ctx(1, 1.0), &cfg);
        assert_eq!(b.values[0], 1.0);
        assert_eq!(s.sum_sq.unwrap()[0], 0.0);
    }

    #[test]
    fn rmsprop_recurrence() {
        // v1 = 2, v2 = 0.5 * 2 + 0.5 * 4 = 3, update2 = 2 / sqrt(3)
        let cfg = RmsPropConfig { beta2: 0.5, eps: 0.0 };
        let mut b = scalar(0.0);
        let mut s = RmsPropState::default();
        grad(&mut b, &[2.0]);
        rmsprop_step(&mut b, &mut s, &ctx(1, 1.0), &cfg);
        let w1 = b.values[0];
        rmsprop_step(&mut b, &mut s, &ctx(2, 1.0), &cfg);
        assert!((s.second.as_ref().unwrap()[0] - 3.0).abs() < 1e-15);
        assert!((w1 - b.values[0] - 2.0 / 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_without_memory_is_sign_descent() {
        let cfg = RmsPropConfig { beta2: 0.0, eps: 0.0 };
        let mut b = vec_block(&[0.0, 0.0, 0.0]);
        let mut s = RmsPropState::default();
        grad(&mut b, &[5.0, -0.01, 0.0]);
        rmsprop_step(&mut b, &mut s, &ctx(1, 0.1), &cfg);
        assert_eq!(b.values.as_slice(), &[-0.1, 0.1, 0.0]);
    }

    #[test]
    fn adam_first_step_is_sign_descent() {
        let cfg = AdamConfig {
            eps: 0.0,
            decay: DecayMode::None,
            ..Default::default()
        };
        let mut b = vec_block(&[0.0, 0.0]);
        grad(&mut b, &[4.0, -9.0]);
        adam_step(&mut b, &mut AdamState::default(), &ctx(1, 0.1), &cfg);
        assert!((b.values[0] + 0.1).abs() < 1e-15);
        assert!((b.values[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn adamw_decay_factor() {
        let cfg = AdamConfig::default();
        let mut b = scalar(1.0);
        adam_step(&mut b, &mut AdamState::default(), &StepContext::new(1, 0.1, 0.1), &cfg);
        assert!((b.values[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn adam_coupled_mode_adds_l2_gradient() {
        let cfg = AdamConfig {
            eps: 0.0,
            decay: DecayMode::CoupledL2,
            ..Default::default()
        };
        // g = 0 but λw = 0.1 > 0, so the first step is sign descent on λw.
        let mut b = scalar(1.0);
        adam_step(&mut b, &mut AdamState::default(), &StepContext::new(1, 0.1, 0.1), &cfg);
        assert!((b.values[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn signsgd_tie_rule_and_constant_gradient() {
        let cfg = SignSgdConfig { beta1: 0.0 };
        let mut b = vec_block(&[0.0, 0.0, 0.0]);
        grad(&mut b, &[2.0, -3.0, 0.0]);
        signsgd_step(&mut b, &mut SignSgdState::default(), &ctx(1, 0.5), &cfg);
        assert_eq!(b.values.as_slice(), &[-0.5, 0.5, 0.0]);

        let cfg = SignSgdConfig::default();
        let mut b = scalar(1.0);
        let mut s = SignSgdState::default();
        grad(&mut b, &[5.0]);
        for t in 1..=3 {
            signsgd_step(&mut b, &mut s, &ctx(t, 0.1), &cfg);
        }
        assert!((b.values[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn prodigy_cases() {
        // Displacement w0 - w = [1, 1], g = [2, 2]: candidate 4 / 4 = 1.
        let mut blocks = vec![vec_block(&[1.0, 1.0])];
        let mut s = ProdigyState {
            eta: 1e-6,
            origin: Some(vec![Matrix::from_column_slice(2, 1, &[2.0, 2.0])]),
        };
        grad(&mut blocks[0], &[2.0, 2.0]);
        prodigy_step(&mut blocks, &mut s, &ctx(1, 1.0));
        assert_eq!(s.eta, 1.0);
        // The weights moved with the old step size.
        assert!((blocks[0].values[0] - (1.0 - 1e-6)).abs() < 1e-15);

        // First step: w = w0, candidate 0, eta unchanged.
        let mut blocks = vec![vec_block(&[0.5, -0.5])];
        let mut s = ProdigyState::default();
        grad(&mut blocks[0], &[1.0, 1.0]);
        prodigy_step(&mut blocks, &mut s, &ctx(1, 1.0));
        assert_eq!(s.eta, PRODIGY_INITIAL_STEP);

        // Negative directional derivative: eta unchanged.
        let mut blocks = vec![vec_block(&[3.0])];
        let mut s = ProdigyState {
            eta: 0.1,
            origin: Some(vec![Matrix::from_column_slice(1, 1, &[0.0])]),
        };
        grad(&mut blocks[0], &[1.0]);
        prodigy_step(&mut blocks, &mut s, &ctx(1, 1.0));
        assert_eq!(s.eta, 0.1);

        // Zero gradient: nothing moves.
        let mut blocks = vec![vec_block(&[3.0])];
        prodigy_step(&mut blocks, &mut s, &ctx(2, 1.0));
        assert_eq!(blocks[0].values[0], 3.0);
        assert_eq!(s.eta, 0.1);
    }
}
