//! Hessian-vector products by finite differences and stochastic estimates of
//! the Hessian diagonal.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::linalg::{Matrix, Vector};
use crate::problems::mlp::Mlp;

/// `(∇f(w + ε v) - ∇f(w)) / ε`. The oracle must use a fixed mini-batch.
pub fn hvp_finite_difference<F>(grad: &mut F, w: &Vector, v: &Vector, eps: f64) -> Vector
where
    F: FnMut(&Vector) -> Vector,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let base = grad(w);
    let shifted = grad(&(w + v * eps));
    (shifted - base) / eps
}

/// `(∇f(w + ε v) - ∇f(w - ε v)) / 2ε`.
pub fn hvp_central_difference<F>(grad: &mut F, w: &Vector, v: &Vector, eps: f64) -> Vector
where
    F: FnMut(&Vector) -> Vector,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let plus = grad(&(w + v * eps));
    let minus = grad(&(w - v * eps));
    (plus - minus) / (2.0 * eps)
}

/// Mean of `u ⊙ Hu` over Gaussian probes `u`.
pub fn hutchinson_diag_estimate<F, R>(grad: &mut F, w: &Vector, samples: usize, eps: f64, rng: &mut R) -> Vector
where
    F: FnMut(&Vector) -> Vector,
    R: Rng + ?Sized,
{
    assert!(samples >= 1, "at least one probe is required");
    let mut acc = Vector::zeros(w.len());
    for _ in 0..samples {
        let u = Vector::from_fn(w.len(), |_, _| StandardNormal.sample(rng));
        let hu = hvp_finite_difference(grad, w, &u, eps);
        acc += u.component_mul(&hu);
    }
    acc / samples as f64
}

/// Gauss-Newton-Bartlett estimate: labels are drawn from the model's own
/// predictive distribution, and `B ĝ ⊙ ĝ` is returned per layer, where `ĝ`
/// is the mean gradient against the sampled labels and `B` the batch size.
pub fn gnb_diag_estimate<R>(model: &Mlp, weights: &[&Matrix], x: &Matrix, rng: &mut R) -> Result<Vec<Matrix>>
where
    R: Rng + ?Sized,
{
    let fwd = model.forward(weights, x)?;
    let sampled: Vec<usize> = fwd
        .probs
        .row_iter()
        .map(|p| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            p.iter()
                .position(|&q| {
                    acc += q;
                    u < acc
                })
                .unwrap_or(p.len() - 1)
        })
        .collect();
    let fb = model.forward_backward(weights, x, &sampled)?;
    let b = x.nrows() as f64;
    Ok(fb.grads.into_iter().map(|g| g.map(|v| b * v * v)).collect())
}
