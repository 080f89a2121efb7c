//! One entry point over every update rule.
//!
//! An [`Optimizer`] owns the per-block state of one algorithm. Blocks the
//! algorithm does not handle (vectors under matrix-only rules; embeddings,
//! heads and vectors under SOAP and Muon) are stepped by the fallback
//! AdamW. After every step all weights are checked for non-finite values.

use std::collections::BTreeMap;

use crate::curvature::{
    ekfac_update, kfac_update, muon_update, shampoo_update, soap_update, sophia_update, splus_update, EkfacConfig,
    EkfacState, KfacConfig, KfacState, MuonConfig, MuonState, ShampooConfig, ShampooState, SoapConfig, SoapState,
    SophiaConfig, SophiaState, SplusConfig, SplusState,
};
use crate::error::{Error, Result};
use crate::first_order::{
    adagrad_step, adam_step, apply_decoupled_decay, dual_averaging_step, prodigy_step, rmsprop_step, sgd_step,
    signsgd_step, AdaGradConfig, AdaGradState, AdamConfig, AdamState, DualAveragingState, ProdigyState, RmsPropConfig,
    RmsPropState, SgdConfig, SgdState, SignSgdConfig, SignSgdState, PRODIGY_INITIAL_STEP,
};
use crate::linalg::Matrix;
use crate::modular::{dualize, modular_step, BlockNorm, ModularConfig, NormKind};
use crate::param::{ParamBlock, Role, StepContext};
use crate::problems::mlp::ForwardCache;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModularMode {
    /// `ΔW_l = -(η_t / s_l) dualize(G_l)`.
    #[default]
    Normalized,
    /// The closed-form steepest-descent step with sharpness `1 / η_t`.
    Theorem,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModularOptions {
    pub mode: ModularMode,
    /// Per-block norms; `None` uses [`ModularConfig::default_for`].
    pub norms: Option<Vec<BlockNorm>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Algorithm {
    Sgd(SgdConfig),
    DualAveraging,
    AdaGrad(AdaGradConfig),
    RmsProp(RmsPropConfig),
    Adam(AdamConfig),
    SignSgd(SignSgdConfig),
    Prodigy { initial_step: f64 },
    Kfac(KfacConfig),
    Ekfac(EkfacConfig),
    Shampoo(ShampooConfig),
    Soap(SoapConfig),
    Splus(SplusConfig),
    Muon(MuonConfig),
    Sophia(SophiaConfig),
    Modular(ModularOptions),
}

pub const ALGORITHM_NAMES: [&str; 17] = [
    "sgd", "heavy-ball", "nesterov", "dual-averaging", "adagrad", "rmsprop", "adam", "adamw", "signsgd", "prodigy",
    "kfac", "ekfac", "shampoo", "soap", "splus", "muon", "sophia",
];

impl Algorithm {
    /// The algorithm with default hyperparameters. `modular` is also
    /// accepted.
    pub fn from_name(name: &str) -> Result<Self> {
        use crate::first_order::{DecayMode, SgdVariant};
        Ok(match name {
            "sgd" => Algorithm::Sgd(SgdConfig {
                momentum: 0.0,
                variant: SgdVariant::Plain,
            }),
            "heavy-ball" => Algorithm::Sgd(SgdConfig {
                variant: SgdVariant::HeavyBall,
                ..SgdConfig::default()
            }),
            "nesterov" => Algorithm::Sgd(SgdConfig {
                variant: SgdVariant::Nesterov,
                ..SgdConfig::default()
            }),
            "dual-averaging" => Algorithm::DualAveraging,
            "adagrad" => Algorithm::AdaGrad(AdaGradConfig::default()),
            "rmsprop" => Algorithm::RmsProp(RmsPropConfig::default()),
            "adam" => Algorithm::Adam(AdamConfig {
                decay: DecayMode::CoupledL2,
                ..AdamConfig::default()
            }),
            "adamw" => Algorithm::Adam(AdamConfig::default()),
            "signsgd" => Algorithm::SignSgd(SignSgdConfig::default()),
            "prodigy" => Algorithm::Prodigy {
                initial_step: PRODIGY_INITIAL_STEP,
            },
            "kfac" => Algorithm::Kfac(KfacConfig::default()),
            "ekfac" => Algorithm::Ekfac(EkfacConfig::default()),
            "shampoo" => Algorithm::Shampoo(ShampooConfig::default()),
            "soap" => Algorithm::Soap(SoapConfig::default()),
            "splus" => Algorithm::Splus(SplusConfig::default()),
            "muon" => Algorithm::Muon(MuonConfig::default()),
            "sophia" => Algorithm::Sophia(SophiaConfig::default()),
            "modular" => Algorithm::Modular(ModularOptions::default()),
            other => return Err(Error::Config(format!("unknown optimizer `{other}`"))),
        })
    }

    pub fn needs_cache(&self) -> bool {
        matches!(self, Algorithm::Kfac(_) | Algorithm::Ekfac(_))
    }

    /// Whether the algorithm itself updates `block`; other blocks go to the
    /// fallback rule.
    pub fn owns(&self, block: &ParamBlock) -> bool {
        match self {
            Algorithm::Kfac(_) | Algorithm::Ekfac(_) | Algorithm::Shampoo(_) | Algorithm::Splus(_) => block.is_matrix(),
            Algorithm::Soap(_) | Algorithm::Muon(_) => block.is_hidden_matrix(),
            _ => true,
        }
    }
}

#[derive(Debug, Clone)]
enum BlockState {
    Sgd(SgdState),
    DualAveraging(DualAveragingState),
    AdaGrad(AdaGradState),
    RmsProp(RmsPropState),
    Adam(AdamState),
    SignSgd(SignSgdState),
    Kfac(KfacState),
    Ekfac(EkfacState),
    Shampoo(ShampooState),
    Soap(SoapState),
    Splus(SplusState),
    Muon(MuonState),
    Fallback(AdamState),
}

/// Extra inputs some algorithms need on a given step.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepInputs<'a> {
    /// Activities and backprop signals, one layer per matrix block in order.
    pub cache: Option<&'a ForwardCache>,
    /// Diagonal Hessian estimate, one entry per block.
    pub hessian: Option<&'a [Matrix]>,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    algorithm: Algorithm,
    fallback: AdamConfig,
    states: BTreeMap<String, BlockState>,
    prodigy: Option<ProdigyState>,
    sophia: SophiaState,
    last_t: u64,
}

impl Optimizer {
    pub fn new(algorithm: Algorithm) -> Self {
        Optimizer::with_fallback(algorithm, AdamConfig::default())
    }

    pub fn with_fallback(algorithm: Algorithm, fallback: AdamConfig) -> Self {
        let prodigy = match algorithm {
            Algorithm::Prodigy { initial_step } => Some(ProdigyState::with_initial_step(initial_step)),
            _ => None,
        };
        Optimizer {
            algorithm,
            fallback,
            states: BTreeMap::new(),
            prodigy,
            sophia: SophiaState::default(),
            last_t: 0,
        }
    }

    pub fn algorithm(&self) -> &Algorithm {
        &self.algorithm
    }

    /// Current automatic step size, for Prodigy.
    pub fn prodigy_step_size(&self) -> Option<f64> {
        self.prodigy.as_ref().map(|p| p.eta)
    }

    pub fn needs_hessian(&self, t: u64) -> bool {
        matches!(&self.algorithm, Algorithm::Sophia(c) if c.needs_hessian(t))
    }

    fn fresh_state(&self, block: &ParamBlock) -> BlockState {
        let (r, c) = block.values.shape();
        if !self.algorithm.owns(block) {
            return BlockState::Fallback(AdamState::default());
        }
        match &self.algorithm {
            Algorithm::Sgd(_) => BlockState::Sgd(SgdState::default()),
            Algorithm::DualAveraging => BlockState::DualAveraging(DualAveragingState::default()),
            Algorithm::AdaGrad(_) => BlockState::AdaGrad(AdaGradState::default()),
            Algorithm::RmsProp(_) => BlockState::RmsProp(RmsPropState::default()),
            Algorithm::Adam(_) => BlockState::Adam(AdamState::default()),
            Algorithm::SignSgd(_) => BlockState::SignSgd(SignSgdState::default()),
            Algorithm::Kfac(_) => BlockState::Kfac(KfacState::new(r, c)),
            Algorithm::Ekfac(_) => BlockState::Ekfac(EkfacState::new(r, c)),
            Algorithm::Shampoo(_) => BlockState::Shampoo(ShampooState::new(r, c)),
            Algorithm::Soap(_) => BlockState::Soap(SoapState::new(r, c)),
            Algorithm::Splus(_) => BlockState::Splus(SplusState::new(r, c)),
            Algorithm::Muon(_) => BlockState::Muon(MuonState::default()),
            Algorithm::Prodigy { .. } | Algorithm::Sophia(_) | Algorithm::Modular(_) => {
                BlockState::Fallback(AdamState::default())
            }
        }
    }

    pub fn step(&mut self, blocks: &mut [ParamBlock], ctx: &StepContext, inputs: StepInputs<'_>) -> Result<()> {
        if ctx.t <= self.last_t {
            return Err(Error::Sequencing(format!(
                "step {} does not follow step {}",
                ctx.t, self.last_t
            )));
        }
        if !(ctx.lr >= 0.0 && ctx.wd >= 0.0) {
            return Err(Error::Config(format!("negative learning rate or decay at step {}", ctx.t)));
        }
        if self.algorithm.needs_cache() && inputs.cache.is_none() {
            return Err(Error::Config("this optimizer needs a forward cache".into()));
        }
        self.last_t = ctx.t;

        match self.algorithm.clone() {
            Algorithm::Prodigy { .. } => {
                prodigy_step(blocks, self.prodigy.as_mut().expect("created with the optimizer"), ctx);
            }
            Algorithm::Sophia(cfg) => sophia_update(blocks, &mut self.sophia, ctx, &cfg, inputs.hessian)?,
            Algorithm::Modular(opts) => modular_update(blocks, ctx, &opts)?,
            _ => self.step_blockwise(blocks, ctx, inputs)?,
        }

        for b in blocks.iter() {
            if !b.is_finite() {
                return Err(Error::Divergence {
                    block: b.id.clone(),
                    step: ctx.t,
                });
            }
        }
        Ok(())
    }

    fn step_blockwise(&mut self, blocks: &mut [ParamBlock], ctx: &StepContext, inputs: StepInputs<'_>) -> Result<()> {
        let mut matrix_index = 0;
        for block in blocks.iter_mut() {
            let layer = if block.is_matrix() {
                matrix_index += 1;
                inputs.cache.and_then(|c| c.layers.get(matrix_index - 1))
            } else {
                None
            };
            if !self.states.contains_key(&block.id) {
                let st = self.fresh_state(block);
                self.states.insert(block.id.clone(), st);
            }
            let state = self.states.get_mut(&block.id).expect("inserted above");
            let missing = || Error::Config(format!("no cached layer for block `{}`", block.id));
            match (&self.algorithm, state) {
                (_, BlockState::Fallback(s)) => adam_step(block, s, ctx, &self.fallback),
                (Algorithm::Sgd(c), BlockState::Sgd(s)) => sgd_step(block, s, ctx, c),
                (Algorithm::DualAveraging, BlockState::DualAveraging(s)) => dual_averaging_step(block, s, ctx),
                (Algorithm::AdaGrad(c), BlockState::AdaGrad(s)) => adagrad_step(block, s, ctx, c),
                (Algorithm::RmsProp(c), BlockState::RmsProp(s)) => rmsprop_step(block, s, ctx, c),
                (Algorithm::Adam(c), BlockState::Adam(s)) => adam_step(block, s, ctx, c),
                (Algorithm::SignSgd(c), BlockState::SignSgd(s)) => signsgd_step(block, s, ctx, c),
                (Algorithm::Kfac(c), BlockState::Kfac(s)) => kfac_update(block, s, layer.ok_or_else(missing)?, ctx, c)?,
                (Algorithm::Ekfac(c), BlockState::Ekfac(s)) => ekfac_update(block, s, layer.ok_or_else(missing)?, ctx, c)?,
                (Algorithm::Shampoo(c), BlockState::Shampoo(s)) => shampoo_update(block, s, ctx, c)?,
                (Algorithm::Soap(c), BlockState::Soap(s)) => soap_update(block, s, ctx, c)?,
                (Algorithm::Splus(c), BlockState::Splus(s)) => splus_update(block, s, ctx, c)?,
                (Algorithm::Muon(c), BlockState::Muon(s)) => muon_update(block, s, ctx, c)?,
                _ => unreachable!("state variant always matches the algorithm"),
            }
        }
        Ok(())
    }

    /// Weights to evaluate with: SPlus iterate averages where present,
    /// current values elsewhere.
    pub fn evaluation_weights(&self, blocks: &[ParamBlock]) -> Vec<Matrix> {
        blocks
            .iter()
            .map(|b| match self.states.get(&b.id) {
                Some(BlockState::Splus(SplusState { average: Some(avg), .. })) => avg.clone(),
                _ => b.values.clone(),
            })
            .collect()
    }
}

fn modular_config(blocks: &[ParamBlock], opts: &ModularOptions, sharpness: f64) -> Result<ModularConfig> {
    match &opts.norms {
        Some(norms) => ModularConfig::new(norms.clone(), sharpness),
        None => {
            let shapes: Vec<_> = blocks.iter().map(|b| b.values.shape()).collect();
            ModularConfig::default_for(&shapes, sharpness)
        }
    }
}

fn modular_update(blocks: &mut [ParamBlock], ctx: &StepContext, opts: &ModularOptions) -> Result<()> {
    let grads: Vec<Matrix> = blocks.iter().map(|b| b.grad.clone()).collect();
    let updates = match opts.mode {
        ModularMode::Theorem => {
            if ctx.lr == 0.0 {
                grads.iter().map(|g| Matrix::zeros(g.nrows(), g.ncols())).collect()
            } else {
                modular_step(&grads, &modular_config(blocks, opts, 1.0 / ctx.lr)?)?
            }
        }
        ModularMode::Normalized => {
            let cfg = modular_config(blocks, opts, 1.0)?;
            if cfg.blocks.len() != grads.len() {
                return Err(Error::Config("modular norms do not cover every block".into()));
            }
            grads
                .iter()
                .zip(&cfg.blocks)
                .map(|(g, b)| Ok(dualize(g, b.norm)? * (-ctx.lr / b.weight)))
                .collect::<Result<Vec<_>>>()?
        }
    };
    for (b, u) in blocks.iter_mut().zip(updates) {
        apply_decoupled_decay(&mut b.values, ctx);
        b.values += u;
    }
    Ok(())
}

/// Sign descent options for every block, for comparisons with the
/// max-of-max modular rule.
pub fn max_of_max_options(blocks: &[ParamBlock]) -> ModularOptions {
    ModularOptions {
        mode: ModularMode::Normalized,
        norms: Some(
            blocks
                .iter()
                .map(|_| BlockNorm {
                    norm: NormKind::MaxOfMax,
                    weight: 1.0,
                })
                .collect(),
        ),
    }
}

/// Roles an MLP assigns to its layers, in order.
pub fn mlp_roles(layers: usize) -> Vec<Role> {
    (0..layers)
        .map(|l| if l + 1 == layers { Role::OutputHead } else { Role::HiddenMatrix })
        .collect()
}
