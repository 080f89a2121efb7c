//! Optimizer trajectories on the Rosenbrock function.

use std::fmt::Write as _;
use std::path::PathBuf;

use optzoo_core::problems::rosenbrock::rosenbrock_eval;
use optzoo_core::{Error, Matrix, Optimizer, ParamBlock, Result, Role, StepContext, StepInputs};

use crate::config::{ExperimentConfig, OptimizerSpec};
use crate::metrics::{write_text, CsvSink};

pub const TRAJECTORY_COLUMNS: [&str; 5] = ["step", "x", "y", "f", "step_size"];
pub const SUMMARY_COLUMNS: [&str; 10] = [
    "optimizer",
    "start",
    "x0",
    "y0",
    "final_x",
    "final_y",
    "initial_f",
    "final_f",
    "diverged",
    "diverged_step",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub step: u64,
    pub x: f64,
    pub y: f64,
    pub f: f64,
    /// Effective step size: the learning rate, times the automatic step
    /// size for Prodigy.
    pub step_size: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub optimizer: String,
    pub start_index: usize,
    pub start: (f64, f64),
    pub points: Vec<TrajectoryPoint>,
    /// Step at which the iterate stopped being finite.
    pub diverged_at: Option<u64>,
    pub path: PathBuf,
}

impl Trajectory {
    pub fn initial_f(&self) -> f64 {
        self.points[0].f
    }

    pub fn final_point(&self) -> &TrajectoryPoint {
        self.points.last().expect("trajectories start with the initial point")
    }
}

/// Runs one optimizer from one start. Divergence ends the trajectory and
/// is recorded rather than returned as an error.
pub fn trajectory(spec: &OptimizerSpec, start: (f64, f64), steps: u64) -> Result<(Vec<TrajectoryPoint>, Option<u64>)> {
    let algorithm = spec.algorithm()?;
    let mut opt = Optimizer::new(algorithm);
    let mut blocks = vec![ParamBlock::matrix(
        "xy",
        Role::HiddenMatrix,
        Matrix::from_row_slice(1, 2, &[start.0, start.1]),
    )];
    let (f0, _) = rosenbrock_eval(start.0, start.1);
    let mut points = vec![TrajectoryPoint {
        step: 0,
        x: start.0,
        y: start.1,
        f: f0,
        step_size: 0.0,
    }];
    for t in 1..=steps {
        let (x, y) = (blocks[0].values[(0, 0)], blocks[0].values[(0, 1)]);
        let (_, g) = rosenbrock_eval(x, y);
        if !g.iter().all(|v| v.is_finite()) {
            return Ok((points, Some(t)));
        }
        blocks[0].set_grad(Matrix::from_row_slice(1, 2, &g));
        let ctx = StepContext::new(t, spec.lr, 0.0);
        match opt.step(&mut blocks, &ctx, StepInputs::default()) {
            Ok(()) => {}
            Err(Error::Divergence { .. }) => return Ok((points, Some(t))),
            Err(e) => return Err(e),
        }
        let (x, y) = (blocks[0].values[(0, 0)], blocks[0].values[(0, 1)]);
        let (f, _) = rosenbrock_eval(x, y);
        points.push(TrajectoryPoint {
            step: t,
            x,
            y,
            f,
            step_size: spec.lr * opt.prodigy_step_size().unwrap_or(1.0),
        });
        if !f.is_finite() {
            return Ok((points, Some(t)));
        }
    }
    Ok((points, None))
}

/// Writes `<optimizer>_start<k>.csv` for every optimizer and start, plus
/// `summary.csv` and `config.txt`.
pub fn run_rosenbrock(cfg: &ExperimentConfig) -> Result<Vec<Trajectory>> {
    let r = &cfg.rosenbrock;
    if r.optimizers.is_empty() {
        return Err(Error::Config("rosenbrock.optimizers is empty".into()));
    }
    if r.starts.is_empty() {
        return Err(Error::Config("rosenbrock.starts is empty".into()));
    }
    let out = &cfg.output_dir;
    write_text(&out.join("config.txt"), &cfg.echo(r.steps))?;
    let mut summary = CsvSink::create(&out.join("summary.csv"), &SUMMARY_COLUMNS)?;
    let mut all = Vec::new();
    for spec in &r.optimizers {
        for (k, &start) in r.starts.iter().enumerate() {
            let (points, diverged_at) = trajectory(spec, start, r.steps)?;
            let path = out.join(format!("{}_start{k}.csv", spec.name));
            let mut sink = CsvSink::create(&path, &TRAJECTORY_COLUMNS)?;
            for p in &points {
                sink.write([p.step.to_string(), p.x.to_string(), p.y.to_string(), p.f.to_string(), p.step_size.to_string()])?;
            }
            let traj = Trajectory {
                optimizer: spec.name.clone(),
                start_index: k,
                start,
                points,
                diverged_at,
                path,
            };
            let last = traj.final_point();
            summary.write([
                traj.optimizer.clone(),
                k.to_string(),
                start.0.to_string(),
                start.1.to_string(),
                last.x.to_string(),
                last.y.to_string(),
                traj.initial_f().to_string(),
                last.f.to_string(),
                diverged_at.is_some().to_string(),
                diverged_at.map(|s| s.to_string()).unwrap_or_default(),
            ])?;
            all.push(traj);
        }
    }
    Ok(all)
}

/// One line per trajectory for the terminal.
pub fn describe(trajectories: &[Trajectory]) -> String {
    let mut s = String::new();
    for t in trajectories {
        let last = t.final_point();
        let _ = writeln!(
            s,
            "{:<10} start ({:>5}, {:>5})  f {:>12.4e} -> {:>12.4e}{}",
            t.optimizer,
            t.start.0,
            t.start.1,
            t.initial_f(),
            last.f,
            t.diverged_at.map(|s| format!("  diverged at step {s}")).unwrap_or_default()
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stationary_start_stays_at_the_minimum() {
        for name in ["sgd", "adamw", "shampoo", "prodigy"] {
            let spec = OptimizerSpec::new(name, crate::config::rosenbrock_default_lr(name));
            let (points, div) = trajectory(&spec, (1.0, 1.0), 50).unwrap();
            assert!(div.is_none());
            let last = points.last().unwrap();
            assert!((last.x - 1.0).abs() < 1e-9 && (last.y - 1.0).abs() < 1e-9, "{name}: {last:?}");
        }
    }
}
