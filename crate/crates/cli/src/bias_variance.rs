//! Bias-variance decomposition of cooldown shapes.
//!
//! From a shared checkpoint, `R` cooldowns that differ only in data order
//! give models `m_i` with mean `m̄`. Against a longer-trained reference
//! `m*`, bias is `L(m̄) - L(m*)` and variance is `mean_i L(m_i) - L(m̄)`.

use optzoo_core::problems::data::Dataset;
use optzoo_core::schedule::{CooldownShape, ScheduleKind, ScheduleSpec};
use optzoo_core::{Error, Matrix, Mlp, Result};

use crate::config::ExperimentConfig;
use crate::data::{self, TrainData};
use crate::metrics::{write_text, CsvSink};
use crate::train::Session;

pub const BIAS_VARIANCE_COLUMNS: [&str; 7] = [
    "shape",
    "runs",
    "reference_loss",
    "mean_model_loss",
    "mean_individual_loss",
    "bias",
    "variance",
];

pub const RUN_COLUMNS: [&str; 4] = ["shape", "run", "permutation_seed", "test_loss"];

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub reference_loss: f64,
    pub mean_model_loss: f64,
    pub individual_losses: Vec<f64>,
    pub mean_individual_loss: f64,
    pub bias: f64,
    pub variance: f64,
}

#[derive(Debug, Clone)]
pub struct ShapeResult {
    pub shape: CooldownShape,
    pub run_weights: Vec<Vec<Matrix>>,
    pub mean_weights: Vec<Matrix>,
    pub decomposition: Decomposition,
}

#[derive(Debug, Clone)]
pub struct BiasVarianceResult {
    pub model: Mlp,
    pub reference_weights: Vec<Matrix>,
    pub shapes: Vec<ShapeResult>,
}

/// Running mean, so identical inputs average to themselves exactly.
fn running_mean<T, F>(items: &[T], mut add: F) -> Option<T>
where
    T: Clone,
    F: FnMut(&T, &T, f64) -> T,
{
    let mut acc = items.first()?.clone();
    for (k, x) in items.iter().enumerate().skip(1) {
        acc = add(&acc, x, 1.0 / (k + 1) as f64);
    }
    Some(acc)
}

/// Blockwise mean of several weight sets.
pub fn mean_weights(runs: &[Vec<Matrix>]) -> Result<Vec<Matrix>> {
    running_mean(runs, |acc, w, step| {
        acc.iter().zip(w).map(|(a, w)| a + (w - a) * step).collect()
    })
    .ok_or_else(|| Error::Config("no runs to average".into()))
}

fn loss(model: &Mlp, weights: &[Matrix], ds: &Dataset) -> Result<f64> {
    let refs: Vec<&Matrix> = weights.iter().collect();
    model.loss(&refs, &ds.features, &ds.labels)
}

/// Decomposes the loss of `runs` against `reference` on `ds`.
pub fn decompose(model: &Mlp, ds: &Dataset, runs: &[Vec<Matrix>], reference: &[Matrix]) -> Result<Decomposition> {
    if runs.len() < 2 {
        return Err(Error::Config(format!("bias-variance needs at least 2 runs, got {}", runs.len())));
    }
    let mean = mean_weights(runs)?;
    let reference_loss = loss(model, reference, ds)?;
    let mean_model_loss = loss(model, &mean, ds)?;
    let individual_losses = runs.iter().map(|w| loss(model, w, ds)).collect::<Result<Vec<_>>>()?;
    let mean_individual_loss = running_mean(&individual_losses, |a, x, s| a + (x - a) * s).expect("nonempty");
    Ok(Decomposition {
        reference_loss,
        mean_model_loss,
        bias: mean_model_loss - reference_loss,
        variance: mean_individual_loss - mean_model_loss,
        individual_losses,
        mean_individual_loss,
    })
}

/// Decays the learning rate to zero over `steps` with `shape`, starting
/// from the session's current step.
fn start_cooldown(session: &mut Session, shape: CooldownShape, steps: u64, max_lr: f64) -> Result<()> {
    session.control.schedule = ScheduleSpec::new(
        ScheduleKind::WarmupStableDecay {
            warmup: 0,
            stable_end: 0,
            total: steps.max(1),
            shape,
        },
        max_lr,
    )?;
    session.control.offset = session.t;
    Ok(())
}

fn run_epochs(session: &mut Session, data: &TrainData, first_epoch: u64, epochs: usize, permutation_seed: u64) -> Result<()> {
    for e in 0..epochs as u64 {
        session.epoch(data, first_epoch + e, permutation_seed, &mut |_| Ok(()))?;
    }
    Ok(())
}

/// Runs the experiment in memory. The checkpoint is trained at constant
/// learning rate; the reference continues from it with a linear cooldown
/// over `reference_epochs`.
pub fn bias_variance_on(cfg: &ExperimentConfig, data: &TrainData) -> Result<BiasVarianceResult> {
    let bv = &cfg.bias_variance;
    if bv.permutation_seeds.len() < 2 {
        return Err(Error::Config(format!(
            "bias-variance needs R >= 2 permutations, got {}",
            bv.permutation_seeds.len()
        )));
    }
    if bv.shapes.is_empty() {
        return Err(Error::Config("bv.shapes must be nonempty".into()));
    }
    let per_epoch = cfg.steps_per_epoch(data.train.len());
    let mut constant = cfg.clone();
    constant.schedule.kind = crate::config::ScheduleName::Constant;
    let mut checkpoint = Session::new(&constant, data.dim(), data.classes, 0)?;
    run_epochs(&mut checkpoint, data, 1, bv.pre_epochs, cfg.seed)?;
    let next_epoch = bv.pre_epochs as u64 + 1;
    let lr = cfg.optimizer.lr;

    let mut reference = checkpoint.clone();
    start_cooldown(&mut reference, CooldownShape::Linear, per_epoch * bv.reference_epochs as u64, lr)?;
    run_epochs(&mut reference, data, next_epoch, bv.reference_epochs, cfg.seed.wrapping_add(0x5EF))?;
    let reference_weights = reference.eval_weights();

    let mut shapes = Vec::new();
    for &shape in &bv.shapes {
        let mut run_weights = Vec::new();
        for &perm in &bv.permutation_seeds {
            let mut run = checkpoint.clone();
            start_cooldown(&mut run, shape, per_epoch * bv.cooldown_epochs as u64, lr)?;
            run_epochs(&mut run, data, next_epoch, bv.cooldown_epochs, perm)?;
            run_weights.push(run.eval_weights());
        }
        let decomposition = decompose(&checkpoint.model, &data.test, &run_weights, &reference_weights)?;
        shapes.push(ShapeResult {
            shape,
            mean_weights: mean_weights(&run_weights)?,
            run_weights,
            decomposition,
        });
    }
    Ok(BiasVarianceResult {
        model: checkpoint.model,
        reference_weights,
        shapes,
    })
}

/// The `bias-variance` subcommand: writes `bias_variance.csv`, `runs.csv`
/// and `config.txt`.
pub fn run_bias_variance(cfg: &ExperimentConfig) -> Result<BiasVarianceResult> {
    let data = data::load(&cfg.data)?;
    run_bias_variance_with(cfg, &data)
}

pub fn run_bias_variance_with(cfg: &ExperimentConfig, data: &TrainData) -> Result<BiasVarianceResult> {
    let out = &cfg.output_dir;
    let per_epoch = cfg.steps_per_epoch(data.train.len());
    write_text(&out.join("config.txt"), &cfg.echo(per_epoch * cfg.bias_variance.cooldown_epochs as u64))?;
    let result = bias_variance_on(cfg, data)?;
    let mut table = CsvSink::create(&out.join("bias_variance.csv"), &BIAS_VARIANCE_COLUMNS)?;
    let mut runs = CsvSink::create(&out.join("runs.csv"), &RUN_COLUMNS)?;
    for s in &result.shapes {
        let d = &s.decomposition;
        table.write([
            s.shape.name().to_string(),
            s.run_weights.len().to_string(),
            d.reference_loss.to_string(),
            d.mean_model_loss.to_string(),
            d.mean_individual_loss.to_string(),
            d.bias.to_string(),
            d.variance.to_string(),
        ])?;
        for (i, (l, seed)) in d.individual_losses.iter().zip(&cfg.bias_variance.permutation_seeds).enumerate() {
            runs.write([s.shape.name().to_string(), i.to_string(), seed.to_string(), l.to_string()])?;
        }
    }
    Ok(result)
}
