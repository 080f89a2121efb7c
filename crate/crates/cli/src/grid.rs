//! Multi-run experiments: the learning-rate spike grid and the learning
//! rate sweep.

use optzoo_core::schedule::SpikeSpec;
use optzoo_core::{Error, Result};

use crate::config::{ExperimentConfig, OptimizerSpec};
use crate::data::{self, TrainData};
use crate::metrics::{write_text, CsvSink, MetricsWriter};
use crate::train::train_on;

pub const GRID_COLUMNS: [&str; 8] = [
    "optimizer",
    "base_lr",
    "period",
    "factor",
    "seed",
    "final_test_accuracy",
    "final_test_loss",
    "diverged",
];

pub const SWEEP_COLUMNS: [&str; 7] = [
    "optimizer",
    "lr",
    "seed",
    "final_test_loss",
    "final_test_accuracy",
    "diverged",
    "winner",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub base_lr: f64,
    pub period: u64,
    pub factor: f64,
    pub final_test_accuracy: f64,
    pub final_test_loss: f64,
    pub diverged: bool,
}

/// Outcome of one run inside a multi-run experiment. Divergence is kept
/// as a result; other errors abort the experiment.
fn run_cell(cfg: &ExperimentConfig, data: &TrainData, dir: &std::path::Path) -> Result<(f64, f64, bool)> {
    let mut writer = MetricsWriter::create(&dir.join("metrics.csv"))?;
    match train_on(cfg, data, Some(&mut writer)) {
        Ok(o) => Ok((
            o.final_test_accuracy().unwrap_or(f64::NAN),
            o.final_test_loss().unwrap_or(f64::NAN),
            false,
        )),
        Err(Error::Divergence { .. }) => Ok((f64::NAN, f64::INFINITY, true)),
        Err(e) => Err(e),
    }
}

fn tag(x: f64) -> String {
    format!("{x:e}")
}

/// The spike grid over (base lr, preconditioner period, spike factor).
/// The spike period equals the preconditioner period so every refresh
/// step is spiked.
pub fn run_spike_grid_on(cfg: &ExperimentConfig, data: &TrainData) -> Result<Vec<GridCell>> {
    if !matches!(cfg.optimizer.name.as_str(), "soap" | "splus") {
        return Err(Error::Config(format!(
            "spike grid needs optimizer.name = soap or splus, got `{}`",
            cfg.optimizer.name
        )));
    }
    let g = &cfg.grid;
    if g.factors.is_empty() || g.periods.is_empty() || g.lrs.is_empty() {
        return Err(Error::Config("grid.factors, grid.periods and grid.lrs must be nonempty".into()));
    }
    let out = &cfg.output_dir;
    let run_steps = cfg.steps_per_epoch(data.train.len()) * cfg.epochs as u64;
    write_text(&out.join("config.txt"), &cfg.echo(run_steps))?;
    let mut sink = CsvSink::create(&out.join("grid.csv"), &GRID_COLUMNS)?;
    let mut cells = Vec::new();
    for &lr in &g.lrs {
        for &period in &g.periods {
            for &factor in &g.factors {
                let mut cell_cfg = cfg.clone();
                cell_cfg.optimizer.lr = lr;
                cell_cfg.optimizer.params.insert("period".into(), period.to_string());
                cell_cfg.spike = Some(SpikeSpec::new(period, factor, g.duration)?);
                let dir = out.join(format!("lr{}_p{period}_f{}", tag(lr), tag(factor)));
                write_text(&dir.join("config.txt"), &cell_cfg.echo(run_steps))?;
                let (acc, loss, diverged) = run_cell(&cell_cfg, data, &dir)?;
                sink.write([
                    cfg.optimizer.name.clone(),
                    lr.to_string(),
                    period.to_string(),
                    factor.to_string(),
                    cfg.seed.to_string(),
                    acc.to_string(),
                    loss.to_string(),
                    diverged.to_string(),
                ])?;
                cells.push(GridCell {
                    base_lr: lr,
                    period,
                    factor,
                    final_test_accuracy: acc,
                    final_test_loss: loss,
                    diverged,
                });
            }
        }
    }
    Ok(cells)
}

pub fn run_spike_grid(cfg: &ExperimentConfig) -> Result<Vec<GridCell>> {
    run_spike_grid_on(cfg, &data::load(&cfg.data)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub optimizer: String,
    pub lr: f64,
    pub final_test_loss: f64,
    pub final_test_accuracy: f64,
    pub diverged: bool,
    pub winner: bool,
}

/// Index of the run with the smallest final test loss; diverged and
/// non-finite runs never win.
pub fn select_winner(losses: &[f64]) -> Option<usize> {
    losses
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_finite())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
}

/// Learning-rate sweep per optimizer; the winner of each optimizer
/// minimizes final test loss. Hyperparameter overrides in the config apply
/// to the configured optimizer only.
pub fn run_sweep_on(cfg: &ExperimentConfig, data: &TrainData) -> Result<Vec<SweepCell>> {
    if cfg.sweep.lrs.is_empty() {
        return Err(Error::Config("sweep.lrs must be nonempty".into()));
    }
    let names = if cfg.sweep.optimizers.is_empty() {
        vec![cfg.optimizer.name.clone()]
    } else {
        cfg.sweep.optimizers.clone()
    };
    let out = &cfg.output_dir;
    let run_steps = cfg.steps_per_epoch(data.train.len()) * cfg.epochs as u64;
    write_text(&out.join("config.txt"), &cfg.echo(run_steps))?;
    let mut cells = Vec::new();
    for name in &names {
        let first = cells.len();
        for &lr in &cfg.sweep.lrs {
            let mut cell_cfg = cfg.clone();
            cell_cfg.optimizer = if *name == cfg.optimizer.name {
                OptimizerSpec { lr, ..cfg.optimizer.clone() }
            } else {
                OptimizerSpec::new(name, lr)
            };
            let dir = out.join(format!("{name}_lr{}", tag(lr)));
            write_text(&dir.join("config.txt"), &cell_cfg.echo(run_steps))?;
            let (acc, loss, diverged) = run_cell(&cell_cfg, data, &dir)?;
            cells.push(SweepCell {
                optimizer: name.clone(),
                lr,
                final_test_loss: loss,
                final_test_accuracy: acc,
                diverged,
                winner: false,
            });
        }
        let losses: Vec<f64> = cells[first..].iter().map(|c| c.final_test_loss).collect();
        if let Some(w) = select_winner(&losses) {
            cells[first + w].winner = true;
        }
    }
    let mut sink = CsvSink::create(&out.join("sweep.csv"), &SWEEP_COLUMNS)?;
    for c in &cells {
        sink.write([
            c.optimizer.clone(),
            c.lr.to_string(),
            cfg.seed.to_string(),
            c.final_test_loss.to_string(),
            c.final_test_accuracy.to_string(),
            c.diverged.to_string(),
            c.winner.to_string(),
        ])?;
    }
    Ok(cells)
}

pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepCell>> {
    run_sweep_on(cfg, &data::load(&cfg.data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn winner_minimizes_finite_loss() {
        assert_eq!(select_winner(&[0.9, 0.4, f64::INFINITY, 0.5]), Some(1));
        assert_eq!(select_winner(&[f64::NAN, f64::INFINITY]), None);
        assert_eq!(select_winner(&[]), None);
    }
}
