//! Cross-module checks against independent oracles: finite differences,
//! closed-form curvature and replayed runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use optzoo_core::curvature::{sophia_update, HessianEstimator, SophiaConfig, SophiaState};
use optzoo_core::hessian::{gnb_diag_estimate, hutchinson_diag_estimate, hvp_central_difference, hvp_finite_difference};
use optzoo_core::param::{flatten_values, unflatten_like};
use optzoo_core::{Algorithm, Matrix, Mlp, Optimizer, ParamBlock, Role, StepContext, StepInputs, Vector};

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn perturbed_weights(model: &Mlp, rng: &mut ChaCha8Rng) -> Vec<Matrix> {
    model
        .init_blocks(1)
        .iter()
        .map(|b| &b.values + gaussian(b.values.nrows(), b.values.ncols(), rng) * 0.3)
        .collect()
}

fn loss(model: &Mlp, w: &[Matrix], x: &Matrix, y: &[usize]) -> f64 {
    model.loss(&w.iter().collect::<Vec<_>>(), x, y).unwrap()
}

#[test]
fn mlp_gradients_match_central_differences() {
    for (seed, dims) in [vec![4, 3, 3, 2], vec![5, 4, 3], vec![3, 6, 2, 4], vec![2, 3]].into_iter().enumerate() {
        let model = Mlp::new(dims.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let w = perturbed_weights(&model, &mut rng);
        let x = gaussian(12, dims[0], &mut rng);
        let classes = *dims.last().unwrap();
        let y: Vec<usize> = (0..12).map(|i| i % classes).collect();
        let analytic = model.forward_backward(&w.iter().collect::<Vec<_>>(), &x, &y).unwrap().grads;
        let h = 1e-6;
        let (mut diff2, mut norm2) = (0.0, 0.0);
        for l in 0..w.len() {
            for k in 0..w[l].len() {
                let (mut plus, mut minus) = (w.clone(), w.clone());
                plus[l][k] += h;
                minus[l][k] -= h;
                let fd = (loss(&model, &plus, &x, &y) - loss(&model, &minus, &x, &y)) / (2.0 * h);
                diff2 += (analytic[l][k] - fd).powi(2);
                norm2 += fd * fd;
            }
        }
        let rel = (diff2 / norm2).sqrt();
        assert!(rel <= 1e-5, "{dims:?}: relative error {rel:e}");
    }
}

#[test]
fn forward_difference_hvp_matches_central_difference_on_mlp() {
    let model = Mlp::new(vec![5, 6, 3]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let blocks: Vec<ParamBlock> = perturbed_weights(&model, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(l, w)| ParamBlock::matrix(format!("layer{l}"), Role::HiddenMatrix, w))
        .collect();
    let x = gaussian(16, 5, &mut rng);
    let y: Vec<usize> = (0..16).map(|i| i % 3).collect();
    let mut grad = |w: &Vector| -> Vector {
        let ws = unflatten_like(&blocks, w);
        let fb = model.forward_backward(&ws.iter().collect::<Vec<_>>(), &x, &y).unwrap();
        Vector::from_iterator(w.len(), fb.grads.iter().flat_map(|g| g.iter().copied()))
    };
    let w = flatten_values(&blocks);
    for _ in 0..5 {
        let v = Vector::from_fn(w.len(), |_, _| StandardNormal.sample(&mut rng));
        let forward = hvp_finite_difference(&mut grad, &w, &v, 1e-7);
        let central = hvp_central_difference(&mut grad, &w, &v, 1e-5);
        let rel = (&forward - &central).norm() / central.norm();
        assert!(rel <= 1e-4, "relative disagreement {rel:e}");
    }
}

/// For a linear softmax model the Gauss-Newton diagonal of the mean loss
/// is `(1/B) Σ_i ā_ij² p_ic (1 - p_ic)`.
#[test]
fn gnb_estimate_is_unbiased_for_the_ggn_diagonal() {
    let model = Mlp::new(vec![3, 2]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let w = gaussian(2, 4, &mut rng);
    let x = gaussian(6, 3, &mut rng);
    let a_bar = x.clone().insert_column(3, 1.0);
    let probs = model.forward(&[&w], &x).unwrap().probs;
    let batch = x.nrows() as f64;
    let ggn = Matrix::from_fn(2, 4, |c, j| {
        (0..x.nrows())
            .map(|i| a_bar[(i, j)].powi(2) * probs[(i, c)] * (1.0 - probs[(i, c)]))
            .sum::<f64>()
            / batch
    });

    let draws = 20_000;
    let mut sum = Matrix::zeros(2, 4);
    let mut sum_sq = Matrix::zeros(2, 4);
    for _ in 0..draws {
        let est = gnb_diag_estimate(&model, &[&w], &x, &mut rng).unwrap().remove(0);
        assert!(est.iter().all(|&v| v >= 0.0));
        sum_sq += est.component_mul(&est);
        sum += est;
    }
    let mean = &sum / draws as f64;
    let var = &sum_sq / draws as f64 - mean.component_mul(&mean);
    for k in 0..mean.len() {
        let se = (var[k] / draws as f64).sqrt();
        assert!(
            (mean[k] - ggn[k]).abs() <= 3.0 * se,
            "entry {k}: estimate {} vs closed form {} (se {se:e})",
            mean[k],
            ggn[k]
        );
    }
}

#[test]
fn sophia_with_hutchinson_learns_the_curvature_of_a_quadratic() {
    let curvature = [2.0, 5.0];
    let grad_of = |w: &Vector| Vector::from_fn(2, |i, _| curvature[i] * w[i]);
    let cfg = SophiaConfig {
        hessian_period: 1,
        estimator: HessianEstimator::Hutchinson,
        ..SophiaConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut block = ParamBlock::matrix("w", Role::HiddenMatrix, Matrix::from_row_slice(1, 2, &[1.0, 1.0]));
    let mut state = SophiaState::default();
    let f = |m: &Matrix| 0.5 * (curvature[0] * m[0].powi(2) + curvature[1] * m[1].powi(2));
    let f0 = f(&block.values);
    for t in 1..=1000 {
        let w = Vector::from_column_slice(block.values.as_slice());
        block.set_grad(Matrix::from_column_slice(1, 2, grad_of(&w).as_slice()));
        let mut grad = |v: &Vector| grad_of(v);
        let h = hutchinson_diag_estimate(&mut grad, &w, 1, 1e-4, &mut rng);
        let h = Matrix::from_column_slice(1, 2, h.as_slice());
        sophia_update(
            std::slice::from_mut(&mut block),
            &mut state,
            &StepContext::new(t, 0.05, 0.0),
            &cfg,
            Some(&[h]),
        )
        .unwrap();
    }
    // One Hutchinson probe of a diagonal Hessian has variance 2h²; the EMA
    // keeps a fraction (1-β)/(1+β) of it.
    let b = cfg.beta2;
    let band = 3.0 * (2.0 * (1.0 - b) / (1.0 + b)).sqrt();
    for (i, &c) in curvature.iter().enumerate() {
        let h = state.h[0][i];
        assert!((h - c).abs() <= band * c, "coordinate {i}: h = {h}, expected {c}");
    }
    assert!(f(&block.values) < 1e-6 * f0, "f = {}", f(&block.values));
}

#[test]
fn replayed_runs_are_bitwise_identical() {
    let model = Mlp::new(vec![6, 8, 8, 3]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = gaussian(20, 6, &mut rng);
    let y: Vec<usize> = (0..20).map(|i| i % 3).collect();
    for name in ["adamw", "soap", "kfac", "ekfac", "muon", "shampoo", "splus", "prodigy", "modular"] {
        let run = || {
            let mut blocks = model.init_blocks(5);
            let mut opt = Optimizer::new(Algorithm::from_name(name).unwrap());
            for t in 1..=100 {
                let fb = model.forward_backward_blocks(&blocks, &x, &y).unwrap();
                for (b, g) in blocks.iter_mut().zip(fb.grads) {
                    b.set_grad(g);
                }
                let inputs = StepInputs {
                    cache: Some(&fb.cache),
                    hessian: None,
                };
                opt.step(&mut blocks, &StepContext::new(t, 1e-3, 0.01), inputs).unwrap();
            }
            blocks
        };
        assert_eq!(run(), run(), "{name} is not deterministic");
    }
}
