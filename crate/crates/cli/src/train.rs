//! The training loop shared by every MLP experiment.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use optzoo_core::curvature::HessianEstimator;
use optzoo_core::hessian::{gnb_diag_estimate, hutchinson_diag_estimate};
use optzoo_core::param::{flatten_values, unflatten_like};
use optzoo_core::problems::data::{batch_iter, Dataset};
use optzoo_core::schedule::{
    bema_update, ema_update, lr_at, spike_lr, wd_at, BemaState, ScheduleSpec, SpikeSpec, WeightDecaySpec,
};
use optzoo_core::{grad_stats, Algorithm, Error, Matrix, Mlp, Optimizer, ParamBlock, Result, StepContext, StepInputs, Vector};

use crate::config::{expand_modular_norms, AveragingSpec, ExperimentConfig};
use crate::data::{self, TrainData};
use crate::metrics::{write_text, MetricsRow, MetricsWriter};

/// Probe step for Hutchinson Hessian-vector products.
const HUTCHINSON_EPS: f64 = 1e-4;

/// Learning rate and weight decay per step. Decay follows the unspiked
/// schedule; the spike multiplies the learning rate only.
#[derive(Debug, Clone)]
pub struct LrControl {
    pub schedule: ScheduleSpec,
    pub weight_decay: WeightDecaySpec,
    pub spike: Option<SpikeSpec>,
    /// The schedule is read at `t - offset`, so a phase started mid-run
    /// begins at its own step zero.
    pub offset: u64,
}

impl LrControl {
    pub fn at(&self, t: u64) -> Result<(f64, f64)> {
        let base = lr_at(&self.schedule, t.saturating_sub(self.offset))?;
        let wd = wd_at(&self.weight_decay, base, self.schedule.max_lr);
        let lr = match &self.spike {
            Some(s) => spike_lr(base, s, t),
            None => base,
        };
        Ok((lr, wd))
    }
}

/// Iterate averaging for evaluation.
#[derive(Debug, Clone)]
pub enum Averager {
    None,
    Ema {
        beta: f64,
        bias_correct: bool,
        mu: Vec<Matrix>,
        current: Option<Vec<Matrix>>,
    },
    Bema {
        states: Vec<BemaState>,
        current: Option<Vec<Matrix>>,
    },
}

impl Averager {
    pub fn new(spec: AveragingSpec, blocks: &[ParamBlock]) -> Self {
        match spec {
            AveragingSpec::None => Averager::None,
            AveragingSpec::Ema { beta, bias_correct } => Averager::Ema {
                beta,
                bias_correct,
                mu: blocks.iter().map(|b| Matrix::zeros(b.values.nrows(), b.values.ncols())).collect(),
                current: None,
            },
            AveragingSpec::Bema(cfg) => Averager::Bema {
                states: blocks.iter().map(|_| BemaState::new(cfg)).collect(),
                current: None,
            },
        }
    }

    pub fn update(&mut self, blocks: &[ParamBlock], t: u64) -> Result<()> {
        match self {
            Averager::None => {}
            Averager::Ema {
                beta,
                bias_correct,
                mu,
                current,
            } => {
                let out = mu
                    .iter_mut()
                    .zip(blocks)
                    .map(|(m, b)| ema_update(m, &b.values, *beta, t, *bias_correct))
                    .collect();
                *current = Some(out);
            }
            Averager::Bema { states, current } => {
                if states.first().is_some_and(|s| s.config.is_update_step(t)) {
                    let out = states
                        .iter_mut()
                        .zip(blocks)
                        .map(|(s, b)| bema_update(s, &b.values, t))
                        .collect::<Result<Vec<_>>>()?;
                    *current = Some(out);
                }
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> Option<&[Matrix]> {
        match self {
            Averager::None => None,
            Averager::Ema { current, .. } | Averager::Bema { current, .. } => current.as_deref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: u64,
    pub mean_train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

/// Model, weights, optimizer and averaging state of one run. Cloning a
/// session clones all of it, which is how cooldown branches share a
/// checkpoint.
#[derive(Debug, Clone)]
pub struct Session {
    pub model: Mlp,
    pub blocks: Vec<ParamBlock>,
    pub optimizer: Optimizer,
    pub control: LrControl,
    pub averager: Averager,
    /// Steps taken so far; the next step is `t + 1`.
    pub t: u64,
    pub batch_size: usize,
    seed: u64,
    hessian_rng: ChaCha8Rng,
}

impl Session {
    /// A fresh session for `cfg` on data of the given shape. `run_steps`
    /// fixes the schedule horizon when the config does not.
    pub fn new(cfg: &ExperimentConfig, dim: usize, classes: usize, run_steps: u64) -> Result<Self> {
        let mut dims = vec![dim];
        dims.extend(&cfg.hidden);
        dims.push(classes);
        let model = Mlp::new(dims)?;
        let blocks = model.init_blocks(cfg.seed);
        let algorithm = expand_modular_norms(cfg.optimizer.algorithm()?, blocks.len());
        let control = LrControl {
            schedule: cfg.schedule.resolve(cfg.optimizer.lr, run_steps)?,
            weight_decay: cfg.weight_decay,
            spike: cfg.spike,
            offset: 0,
        };
        Ok(Session {
            averager: Averager::new(cfg.averaging, &blocks),
            model,
            blocks,
            optimizer: Optimizer::new(algorithm),
            control,
            t: 0,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            hessian_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_4E55),
        })
    }

    /// Weights used for evaluation: the configured average when one
    /// exists, otherwise the optimizer's own (SPlus keeps an average).
    pub fn eval_weights(&self) -> Vec<Matrix> {
        match self.averager.weights() {
            Some(w) => w.to_vec(),
            None => self.optimizer.evaluation_weights(&self.blocks),
        }
    }

    pub fn evaluate(&self, ds: &Dataset) -> Result<(f64, f64)> {
        let w = self.eval_weights();
        let refs: Vec<&Matrix> = w.iter().collect();
        self.model.evaluate(&refs, &ds.features, &ds.labels)
    }

    fn hessian_estimate(&mut self, x: &Matrix, y: &[usize]) -> Result<Vec<Matrix>> {
        let estimator = match self.optimizer.algorithm() {
            Algorithm::Sophia(c) => c.estimator,
            _ => unreachable!("only Sophia asks for Hessian estimates"),
        };
        let weights: Vec<&Matrix> = self.blocks.iter().map(|b| &b.values).collect();
        match estimator {
            HessianEstimator::GaussNewtonBartlett => gnb_diag_estimate(&self.model, &weights, x, &mut self.hessian_rng),
            HessianEstimator::Hutchinson => {
                let (model, blocks) = (&self.model, &self.blocks);
                let mut grad = |w: &Vector| -> Vector {
                    let ws = unflatten_like(blocks, w);
                    let refs: Vec<&Matrix> = ws.iter().collect();
                    let fb = model.forward_backward(&refs, x, y).expect("shapes checked by the forward pass");
                    Vector::from_iterator(w.len(), fb.grads.iter().flat_map(|g| g.iter().copied()))
                };
                let flat = flatten_values(blocks);
                let est = hutchinson_diag_estimate(&mut grad, &flat, 1, HUTCHINSON_EPS, &mut self.hessian_rng);
                Ok(unflatten_like(blocks, &est))
            }
        }
    }

    /// One optimizer step on a batch. Returns the step's telemetry with
    /// `test_accuracy` unset and `wall_ms` zero.
    pub fn step(&mut self, x: &Matrix, y: &[usize], epoch: u64) -> Result<MetricsRow> {
        let t = self.t + 1;
        let (lr, wd) = self.control.at(t)?;
        let fb = self.model.forward_backward_blocks(&self.blocks, x, y)?;
        if !fb.loss.is_finite() {
            return Err(Error::Divergence {
                block: "loss".into(),
                step: t,
            });
        }
        for (b, g) in self.blocks.iter_mut().zip(fb.grads) {
            b.set_grad(g);
        }
        let ctx = StepContext {
            t,
            epoch,
            lr,
            wd,
            seed: self.seed,
        };
        let stats = grad_stats(&self.blocks, &ctx);
        let hessian = if self.optimizer.needs_hessian(t) {
            Some(self.hessian_estimate(x, y)?)
        } else {
            None
        };
        let inputs = StepInputs {
            cache: Some(&fb.cache),
            hessian: hessian.as_deref(),
        };
        self.optimizer.step(&mut self.blocks, &ctx, inputs)?;
        self.t = t;
        self.averager.update(&self.blocks, t)?;
        Ok(MetricsRow {
            step: t,
            epoch,
            lr,
            wd,
            train_loss: fb.loss,
            global_grad_norm: stats.global_grad_norm,
            global_weight_norm: stats.global_weight_norm,
            max_block_ratio: stats.max_ratio(),
            test_accuracy: None,
            wall_ms: 0.0,
        })
    }

    /// One pass over `train` in the order fixed by `permutation_seed`, then
    /// a test evaluation. Every row goes to `emit`.
    pub fn epoch<F>(&mut self, data: &TrainData, epoch: u64, permutation_seed: u64, emit: &mut F) -> Result<EpochSummary>
    where
        F: FnMut(MetricsRow) -> Result<()>,
    {
        let mut loss_sum = 0.0;
        let mut last = None;
        let batches = batch_iter(data.train.len(), self.batch_size, epoch, permutation_seed);
        for idx in &batches {
            let (x, y) = data.train.batch(idx);
            let row = self.step(&x, &y, epoch)?;
            loss_sum += row.train_loss;
            last = Some(row.clone());
            emit(row)?;
        }
        let (test_loss, test_accuracy) = self.evaluate(&data.test)?;
        let mean_train_loss = loss_sum / batches.len().max(1) as f64;
        if let Some(last) = last {
            emit(MetricsRow {
                train_loss: mean_train_loss,
                test_accuracy: Some(test_accuracy),
                ..last
            })?;
        }
        Ok(EpochSummary {
            epoch,
            mean_train_loss,
            test_loss,
            test_accuracy,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub epochs: Vec<EpochSummary>,
    pub final_weights: Vec<Matrix>,
    pub eval_weights: Vec<Matrix>,
    /// Automatic step size at the end, for Prodigy.
    pub prodigy_step_size: Option<f64>,
}

impl TrainOutcome {
    pub fn final_test_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_loss)
    }

    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_accuracy)
    }

    /// First epoch whose test accuracy reaches `target`.
    pub fn epoch_reaching(&self, target: f64) -> Option<u64> {
        self.epochs.iter().find(|e| e.test_accuracy >= target).map(|e| e.epoch)
    }
}

/// Trains for `cfg.epochs` epochs, sending rows to `writer` when given.
/// Epoch `e` (1-based) shuffles with the run seed.
pub fn train_on(cfg: &ExperimentConfig, data: &TrainData, mut writer: Option<&mut MetricsWriter>) -> Result<TrainOutcome> {
    let run_steps = cfg.steps_per_epoch(data.train.len()) * cfg.epochs as u64;
    let mut session = Session::new(cfg, data.dim(), data.classes, run_steps)?;
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut epochs = Vec::new();
    for e in 1..=cfg.epochs as u64 {
        let mut emit = |mut row: MetricsRow| -> Result<()> {
            row.wall_ms = start.elapsed().as_secs_f64() * 1e3;
            if let Some(w) = writer.as_deref_mut() {
                w.write(&row)?;
            }
            rows.push(row);
            Ok(())
        };
        epochs.push(session.epoch(data, e, cfg.seed, &mut emit)?);
    }
    Ok(TrainOutcome {
        rows,
        epochs,
        final_weights: session.blocks.iter().map(|b| b.values.clone()).collect(),
        eval_weights: session.eval_weights(),
        prodigy_step_size: session.optimizer.prodigy_step_size(),
    })
}

/// Plain-text weights: a `# id rows cols` line per block, then its rows.
pub fn format_weights(ids: &[String], weights: &[Matrix]) -> String {
    let mut out = String::new();
    for (id, w) in ids.iter().zip(weights) {
        let _ = writeln!(out, "# {id} {} {}", w.nrows(), w.ncols());
        for r in w.row_iter() {
            let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
    }
    out
}

/// The `train` subcommand: loads data, writes `config.txt`, `metrics.csv`
/// and (optionally) `weights_final.txt` / `weights_eval.txt` into the
/// output directory.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let data = data::load(&cfg.data)?;
    run_train_with(cfg, &data, &cfg.output_dir)
}

pub fn run_train_with(cfg: &ExperimentConfig, data: &TrainData, out: &Path) -> Result<TrainOutcome> {
    let run_steps = cfg.steps_per_epoch(data.train.len()) * cfg.epochs as u64;
    let mut echo = cfg.echo(run_steps);
    let _ = writeln!(echo, "# data: {}", data.origin);
    write_text(&out.join("config.txt"), &echo)?;
    let mut writer = MetricsWriter::create(&out.join("metrics.csv"))?;
    let outcome = train_on(cfg, data, Some(&mut writer))?;
    if cfg.save_weights {
        let model_ids: Vec<String> = (0..outcome.final_weights.len()).map(|l| format!("layer{l}")).collect();
        write_text(&out.join("weights_final.txt"), &format_weights(&model_ids, &outcome.final_weights))?;
        write_text(&out.join("weights_eval.txt"), &format_weights(&model_ids, &outcome.eval_weights))?;
    }
    Ok(outcome)
}
