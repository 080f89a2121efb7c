//! The invariant suite behind `optzoo check`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use optzoo_core::curvature::{
    ekfac_update, kfac_update, sophia_direction, EkfacConfig, EkfacState, KfacConfig, KfacState, ShampooConfig,
};
use optzoo_core::first_order::sign0;
use optzoo_core::linalg::{
    inner, is_symmetric_psd, newton_schulz_msign, psd_power, qr_orthonormal, svd, sym_eig, NS_COEFFS,
    NS_REL_TOLERANCE, NS_SIGMA_BRACKET, NS_STEPS,
};
use optzoo_core::modular::{dual_norm, dualize, primal_norm, NormKind};
use optzoo_core::optimizer::max_of_max_options;
use optzoo_core::problems::data::{batch_iter, random_orthonormal};
use optzoo_core::schedule::{
    lr_at, wd_at, BemaConfig, CooldownShape, ScheduleKind, ScheduleSpec, SpikeSpec, WeightDecaySpec,
};
use optzoo_core::{grad_stats, Algorithm, Error, Matrix, Mlp, Optimizer, ParamBlock, Result, Role, StepContext, StepInputs, Vector};

/// Deliberate defects for testing that the suite detects them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Faults {
    /// Scales the duality map's output by 0.9.
    pub corrupt_duality: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub results: Vec<CheckResult>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.results.iter().filter(|r| !r.passed).map(|r| r.name).collect()
    }

    pub fn render(&self) -> String {
        self.results
            .iter()
            .map(|r| format!("{} {:<40} {}\n", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail))
            .collect()
    }
}

type Outcome = std::result::Result<String, String>;

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lift<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn dualize_with(faults: Faults, g: &Matrix, kind: NormKind) -> Result<Matrix> {
    let v = dualize(g, kind)?;
    Ok(if faults.corrupt_duality { v * 0.9 } else { v })
}

const NORM_KINDS: [NormKind; 4] = [
    NormKind::Euclid,
    NormKind::MaxOfMax,
    NormKind::Spectral,
    NormKind::RmsToRms { d_out: 5, d_in: 3 },
];

fn eigen_reconstruction() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let f = gaussian(6, 6, seed);
        let a = &f * f.transpose();
        let eig = lift(sym_eig(&a))?;
        worst = worst.max((eig.reconstruct() - &a).amax() / a.amax());
        let q = &eig.eigenvectors;
        worst = worst.max((q.transpose() * q - Matrix::identity(6, 6)).amax());
    }
    ensure(worst < 1e-12, || format!("relative error {worst:e}"))?;
    Ok(format!("max error {worst:.1e}"))
}

fn svd_reconstruction() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let g = gaussian(5, 3, 100 + seed);
        worst = worst.max((lift(svd(&g))?.reconstruct() - &g).amax());
    }
    ensure(worst < 1e-12, || format!("error {worst:e}"))?;
    Ok(format!("max error {worst:.1e}"))
}

fn psd_inverse() -> Outcome {
    let f = gaussian(5, 5, 7);
    let a = &f * f.transpose() + Matrix::identity(5, 5);
    let err = (lift(psd_power(&a, -1.0, 0.0))? * &a - Matrix::identity(5, 5)).amax();
    ensure(err < 1e-10, || format!("A^-1 A differs from I by {err:e}"))?;
    let singular = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 0.0]));
    ensure(matches!(psd_power(&singular, -1.0, 0.0), Err(Error::Singular { .. })), || {
        "undamped inverse of a singular matrix did not fail".into()
    })?;
    Ok(format!("error {err:.1e}"))
}

fn newton_schulz_bracket() -> Outcome {
    let (lo, hi) = NS_SIGMA_BRACKET;
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let g = gaussian(16, 8, 10_000 + seed);
        let ns = newton_schulz_msign(&g, NS_STEPS, NS_COEFFS);
        let target = lift(svd(&g))?.polar();
        worst = worst.max((&ns - &target).norm() / target.norm());
        let s = lift(svd(&ns))?.sigma;
        ensure(s.min() >= lo && s.max() <= hi, || format!("seed {seed}: singular values outside [{lo}, {hi}]"))?;
    }
    ensure(worst <= NS_REL_TOLERANCE, || format!("relative distance {worst} above {NS_REL_TOLERANCE}"))?;
    Ok(format!("max relative distance {worst:.4}"))
}

fn mlp_blocks(seed: u64) -> (Mlp, Vec<ParamBlock>, Matrix, Vec<usize>) {
    let model = Mlp::new(vec![4, 5, 3]).expect("valid dims");
    let mut blocks = model.init_blocks(seed);
    let x = gaussian(16, 4, seed + 1);
    let y: Vec<usize> = (0..16).map(|i| i % 3).collect();
    let fb = model.forward_backward_blocks(&blocks, &x, &y).expect("shapes match");
    for (b, g) in blocks.iter_mut().zip(fb.grads) {
        b.set_grad(g);
    }
    (model, blocks, x, y)
}

fn zero_gradient_no_op() -> Outcome {
    for name in ["sgd", "heavy-ball", "nesterov", "adagrad", "rmsprop", "adam", "adamw", "signsgd", "muon", "soap", "shampoo"] {
        let (_, mut blocks, _, _) = mlp_blocks(3);
        for b in blocks.iter_mut() {
            b.grad.fill(0.0);
        }
        let before = blocks.clone();
        let mut opt = Optimizer::new(lift(Algorithm::from_name(name))?);
        for t in 1..=3 {
            lift(opt.step(&mut blocks, &StepContext::new(t, 0.1, 0.0), StepInputs::default()))?;
        }
        ensure(blocks == before, || format!("{name} moved weights on zero gradients"))?;
    }
    Ok("11 optimizers".into())
}

fn telemetry_read_only() -> Outcome {
    let (_, blocks, _, _) = mlp_blocks(4);
    let before = blocks.clone();
    let stats = grad_stats(&blocks, &StepContext::new(1, 0.1, 0.01));
    ensure(blocks == before, || "telemetry changed the blocks".into())?;
    let direct: f64 = blocks.iter().map(|b| b.grad.norm_squared()).sum::<f64>().sqrt();
    ensure((stats.global_grad_norm - direct).abs() <= 1e-12 * direct, || "global norm mismatch".into())?;
    Ok(format!("global grad norm {:.4}", stats.global_grad_norm))
}

fn step_sequencing() -> Outcome {
    let (_, mut blocks, _, _) = mlp_blocks(5);
    let mut opt = Optimizer::new(lift(Algorithm::from_name("adamw"))?);
    lift(opt.step(&mut blocks, &StepContext::new(1, 0.1, 0.0), StepInputs::default()))?;
    ensure(
        matches!(opt.step(&mut blocks, &StepContext::new(1, 0.1, 0.0), StepInputs::default()), Err(Error::Sequencing(_))),
        || "a repeated step index was accepted".into(),
    )?;
    Ok("repeated step rejected".into())
}

fn shampoo_orthogonalizes() -> Outcome {
    let cfg = ShampooConfig {
        beta2: 0.0,
        damping: 0.0,
        exponent: 0.25,
        precond_period: 1,
        bias_correct: false,
    };
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let g = gaussian(6, 6, 200 + seed);
        let mut block = ParamBlock::matrix("w", Role::HiddenMatrix, Matrix::zeros(6, 6));
        block.set_grad(g.clone());
        let mut opt = Optimizer::new(Algorithm::Shampoo(cfg));
        lift(opt.step(std::slice::from_mut(&mut block), &StepContext::new(1, 1.0, 0.0), StepInputs::default()))?;
        let target = lift(svd(&g))?.polar();
        worst = worst.max((&block.values + target).norm());
    }
    ensure(worst < 1e-8, || format!("Frobenius error {worst:e}"))?;
    Ok(format!("max error {worst:.1e}"))
}

fn kfac_factors_psd() -> Outcome {
    let (model, mut blocks, x, y) = mlp_blocks(6);
    let cfg = lift(KfacConfig::new(0.95, 1e-3, 1))?;
    let mut states: Vec<KfacState> = blocks.iter().map(|b| KfacState::new(b.values.nrows(), b.values.ncols())).collect();
    for t in 1..=5 {
        let fb = lift(model.forward_backward_blocks(&blocks, &x, &y))?;
        for (l, (b, s)) in blocks.iter_mut().zip(states.iter_mut()).enumerate() {
            b.set_grad(fb.grads[l].clone());
            lift(kfac_update(b, s, &fb.cache.layers[l], &StepContext::new(t, 0.05, 0.0), &cfg))?;
        }
    }
    for (l, s) in states.iter().enumerate() {
        ensure(is_symmetric_psd(&s.a, 1e-12) && is_symmetric_psd(&s.s, 1e-12), || {
            format!("layer {l} factors not symmetric PSD")
        })?;
    }
    Ok(format!("{} layers", states.len()))
}

fn ekfac_bases_orthonormal() -> Outcome {
    let (model, mut blocks, x, y) = mlp_blocks(7);
    let cfg = EkfacConfig {
        eigen_period: 1,
        ..EkfacConfig::default()
    };
    let mut states: Vec<EkfacState> = blocks.iter().map(|b| EkfacState::new(b.values.nrows(), b.values.ncols())).collect();
    for t in 1..=3 {
        let fb = lift(model.forward_backward_blocks(&blocks, &x, &y))?;
        for (l, (b, s)) in blocks.iter_mut().zip(states.iter_mut()).enumerate() {
            b.set_grad(fb.grads[l].clone());
            lift(ekfac_update(b, s, &fb.cache.layers[l], &StepContext::new(t, 0.01, 0.0), &cfg))?;
        }
    }
    let id = |q: &Matrix| (q.transpose() * q - Matrix::identity(q.ncols(), q.ncols())).amax();
    let mut worst = 0.0f64;
    for s in &states {
        let (ba, bs) = match (&s.basis_a, &s.basis_s) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err("eigenbases missing after refresh".into()),
        };
        worst = worst.max(id(ba)).max(id(bs));
        ensure(s.second_moment.iter().all(|&v| v >= 0.0), || "negative eigenbasis second moment".into())?;
    }
    ensure(worst < 1e-10, || format!("orthonormality error {worst:e}"))?;
    Ok(format!("orthonormality error {worst:.1e}"))
}

fn sophia_bounded() -> Outcome {
    let m = gaussian(8, 8, 9) * 10.0;
    let h = gaussian(8, 8, 10);
    let d = sophia_direction(&m, &h, 1e-12, 1.0);
    ensure(d.amax() <= 1.0, || format!("entry {} exceeds the clip", d.amax()))?;
    Ok("|direction| <= clip".into())
}

fn muon_scale_invariant() -> Outcome {
    let g = gaussian(8, 5, 11);
    let a = newton_schulz_msign(&g, NS_STEPS, NS_COEFFS);
    let b = newton_schulz_msign(&(&g * 1e3), NS_STEPS, NS_COEFFS);
    let err = (&a - &b).amax();
    ensure(err < 1e-12, || format!("scaled input changes the output by {err:e}"))?;
    Ok(format!("difference {err:.1e}"))
}

fn duality_exactness(faults: Faults) -> Outcome {
    let mut worst = 0.0f64;
    for kind in NORM_KINDS {
        for seed in 0..20 {
            let g = gaussian(5, 3, 300 + seed);
            let v = lift(dualize_with(faults, &g, kind))?;
            let dual = lift(dual_norm(&g, kind))?;
            let err = (inner(&g, &v) - dual).abs() / dual.max(1.0);
            worst = worst.max(err);
            ensure(err <= 1e-10, || format!("{kind:?} seed {seed}: <G, dualize(G)> off by {err:e}"))?;
        }
    }
    Ok(format!("max error {worst:.1e}"))
}

fn unit_primal_norm(faults: Faults) -> Outcome {
    for kind in NORM_KINDS {
        for seed in 0..10 {
            let g = gaussian(5, 3, 400 + seed);
            let n = lift(primal_norm(&lift(dualize_with(faults, &g, kind))?, kind))?;
            ensure((n - 1.0).abs() <= 1e-10, || format!("{kind:?}: primal norm {n}"))?;
        }
        ensure(lift(dualize_with(faults, &Matrix::zeros(5, 3), kind))?.iter().all(|&x| x == 0.0), || {
            format!("{kind:?}: zero gradient not mapped to zero")
        })?;
    }
    Ok("unit norm, zero to zero".into())
}

fn max_of_max_sign_descent() -> Outcome {
    let (_, blocks, _, _) = mlp_blocks(12);
    let lr = 0.01;
    let mut modular = blocks.clone();
    let mut opt = Optimizer::new(Algorithm::Modular(max_of_max_options(&blocks)));
    lift(opt.step(&mut modular, &StepContext::new(1, lr, 0.0), StepInputs::default()))?;
    for (m, b) in modular.iter().zip(&blocks) {
        let expected = &b.values - b.grad.map(sign0) * lr;
        ensure(m.values == expected, || format!("block {} differs from sign descent", b.id))?;
    }
    Ok("bitwise equal".into())
}

fn schedules_nonnegative() -> Outcome {
    let total = 100;
    let kinds = [
        ScheduleKind::Constant,
        ScheduleKind::WarmupStableDecay {
            warmup: 10,
            stable_end: 70,
            total,
            shape: CooldownShape::Sqrt,
        },
        ScheduleKind::LinearDecay { total },
        ScheduleKind::Cosine { total, min_lr: 0.0 },
        ScheduleKind::Step { period: 30, factor: 0.5 },
        ScheduleKind::Exponential { rate: 0.01 },
        ScheduleKind::OneCycle {
            total,
            peak_fraction: 0.3,
        },
        ScheduleKind::ConstantCooldown { cooldown: 20, total },
    ];
    for kind in kinds {
        let spec = lift(ScheduleSpec::new(kind, 0.1))?;
        for t in 0..=total {
            let lr = lift(lr_at(&spec, t))?;
            ensure(lr >= 0.0 && lr <= 0.1 + 1e-15, || format!("{kind:?} at {t}: {lr}"))?;
        }
        if spec.horizon().is_some() {
            ensure(matches!(lr_at(&spec, total + 1), Err(Error::ScheduleExhausted { .. })), || {
                format!("{kind:?} accepted a step past its horizon")
            })?;
        }
    }
    Ok("8 schedules".into())
}

fn scheduled_decay_ratio() -> Outcome {
    let spec = lift(ScheduleSpec::new(ScheduleKind::Cosine { total: 200, min_lr: 0.0 }, 0.3))?;
    let wd = WeightDecaySpec {
        base: 0.05,
        scheduled: true,
    };
    let target = (2.0f64 * 0.05 / 0.3).sqrt();
    let mut worst = 0.0f64;
    for t in 0..200 {
        let lr = lift(lr_at(&spec, t))?;
        if lr > 0.0 {
            let ratio = (2.0 * wd_at(&wd, lr, 0.3) / lr).sqrt();
            worst = worst.max((ratio - target).abs() / target);
        }
    }
    ensure(worst < 1e-14, || format!("relative drift {worst:e}"))?;
    Ok(format!("max relative drift {worst:.1e}"))
}

fn spike_windows() -> Outcome {
    let s = lift(SpikeSpec::new(10, 4.0, 2))?;
    let active: Vec<u64> = (0..35).filter(|&t| s.active(t)).collect();
    ensure(active == [10, 11, 20, 21, 30, 31], || format!("active steps {active:?}"))?;
    Ok("windows at multiples of the period".into())
}

fn bema_coefficients_decay() -> Outcome {
    let c = BemaConfig::default();
    for t in 0..500 {
        ensure(c.alpha(t + 1) < c.alpha(t) && c.beta(t + 1) < c.beta(t), || format!("not decreasing at {t}"))?;
        ensure(c.beta(t) > 0.0 && c.beta(t) <= 1.0, || format!("beta out of (0, 1] at {t}"))?;
    }
    Ok("alpha and beta strictly decreasing".into())
}

fn cache_gradient_bitwise() -> Outcome {
    let (model, blocks, x, y) = mlp_blocks(13);
    let fb = lift(model.forward_backward_blocks(&blocks, &x, &y))?;
    for (l, layer) in fb.cache.layers.iter().enumerate() {
        ensure(layer.gradient() == fb.grads[l], || format!("layer {l} cached gradient differs"))?;
    }
    Ok(format!("{} layers", fb.cache.layers.len()))
}

fn batches_partition() -> Outcome {
    for (n, b) in [(10, 3), (128, 128), (1000, 64)] {
        let mut all: Vec<usize> = batch_iter(n, b, 2, 9).concat();
        all.sort_unstable();
        ensure(all == (0..n).collect::<Vec<_>>(), || format!("n={n} b={b}: not a partition"))?;
    }
    Ok("every example once per epoch".into())
}

fn projection_orthonormal() -> Outcome {
    let q = lift(random_orthonormal(64, 16, 3))?;
    let err = (q.transpose() * &q - Matrix::identity(16, 16)).amax();
    ensure(err < 1e-12, || format!("QᵀQ differs from I by {err:e}"))?;
    let again = lift(random_orthonormal(64, 16, 3))?;
    ensure(q == again, || "projection not reproducible from its seed".into())?;
    let _ = lift(qr_orthonormal(&q))?;
    Ok(format!("error {err:.1e}"))
}

/// Mean `‖G‖ / ‖w‖` after burn-in when gradients of fixed norm are always
/// orthogonal to `w` and SGD runs with decoupled weight decay.
pub fn equilibrium_ratio(dim: usize, decay: f64, lr: f64, steps: usize, burn_in: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |n: usize| Vector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let mut w = normal(dim);
    let (mut sum, mut count) = (0.0, 0usize);
    for step in 0..steps {
        let mut g = normal(dim);
        g -= &w * (g.dot(&w) / w.norm_squared());
        g /= g.norm();
        if step >= burn_in {
            sum += g.norm() / w.norm();
            count += 1;
        }
        w = &w * (1.0 - lr * decay) - g * lr;
    }
    sum / count as f64
}

pub const EQUILIBRIUM_DIM: usize = 32;
pub const EQUILIBRIUM_DECAY: f64 = 0.1;
pub const EQUILIBRIUM_LR: f64 = 0.05;

fn rotational_equilibrium() -> Outcome {
    let ratio = equilibrium_ratio(EQUILIBRIUM_DIM, EQUILIBRIUM_DECAY, EQUILIBRIUM_LR, 6000, 3000, 0);
    let target = (2.0 * EQUILIBRIUM_DECAY / EQUILIBRIUM_LR).sqrt();
    let rel = (ratio - target).abs() / target;
    ensure(rel <= 0.05, || format!("ratio {ratio:.4} vs {target:.4}"))?;
    Ok(format!("ratio {ratio:.4}, target {target:.4}"))
}

/// Runs every check. Faults are injected only where requested.
pub fn run_check_with(faults: Faults) -> CheckReport {
    let checks: Vec<(&'static str, Box<dyn Fn() -> Outcome>)> = vec![
        ("linalg.eigen_reconstruction", Box::new(eigen_reconstruction)),
        ("linalg.svd_reconstruction", Box::new(svd_reconstruction)),
        ("linalg.psd_inverse", Box::new(psd_inverse)),
        ("linalg.newton_schulz_bracket", Box::new(newton_schulz_bracket)),
        ("optim.zero_gradient_no_op", Box::new(zero_gradient_no_op)),
        ("optim.telemetry_read_only", Box::new(telemetry_read_only)),
        ("optim.step_sequencing", Box::new(step_sequencing)),
        ("curvature.shampoo_orthogonalizes", Box::new(shampoo_orthogonalizes)),
        ("curvature.kfac_factors_psd", Box::new(kfac_factors_psd)),
        ("curvature.ekfac_bases_orthonormal", Box::new(ekfac_bases_orthonormal)),
        ("curvature.sophia_bounded", Box::new(sophia_bounded)),
        ("curvature.newton_schulz_scale_invariant", Box::new(muon_scale_invariant)),
        ("modular.duality_exactness", Box::new(move || duality_exactness(faults))),
        ("modular.unit_primal_norm", Box::new(move || unit_primal_norm(faults))),
        ("modular.max_of_max_sign_descent", Box::new(max_of_max_sign_descent)),
        ("schedule.nonnegative_within_horizon", Box::new(schedules_nonnegative)),
        ("schedule.scheduled_decay_ratio", Box::new(scheduled_decay_ratio)),
        ("schedule.spike_windows", Box::new(spike_windows)),
        ("schedule.bema_coefficients_decay", Box::new(bema_coefficients_decay)),
        ("data.cache_gradient_bitwise", Box::new(cache_gradient_bitwise)),
        ("data.batches_partition", Box::new(batches_partition)),
        ("data.projection_orthonormal", Box::new(projection_orthonormal)),
        ("training.rotational_equilibrium", Box::new(rotational_equilibrium)),
    ];
    let results = checks
        .into_iter()
        .map(|(name, f)| {
            let (passed, detail) = match f() {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult { name, passed, detail }
        })
        .collect();
    CheckReport { results }
}

pub fn run_check() -> CheckReport {
    run_check_with(Faults::default())
}
