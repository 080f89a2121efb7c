use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use optzoo_cli::check::{run_check_with, Faults};
use optzoo_cli::{bias_variance, data, exit_code, grid, rosenbrock, train, ExperimentConfig, ExperimentKind};
use optzoo_cli::{EXIT_CONFIG, EXIT_INVARIANT};
use optzoo_core::{Error, Result};

#[derive(Parser)]
#[command(name = "optzoo", version, about = "Optimizer zoo experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the MLP and write per-step metrics.
    Train { config: PathBuf },
    /// Trajectories of several optimizers on the Rosenbrock function.
    Rosenbrock { config: PathBuf },
    /// Final accuracy over (spike factor, preconditioner period, base lr).
    SpikeGrid { config: PathBuf },
    /// Bias and variance of cooldown shapes.
    BiasVariance { config: PathBuf },
    /// Learning-rate sweep; the winner minimizes final test loss.
    Sweep { config: PathBuf },
    /// Project CIFAR-10 binaries to a lower dimension.
    Project {
        in_dir: PathBuf,
        out_file: PathBuf,
        #[arg(long, default_value_t = 256)]
        dim: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Run the invariant suite.
    Check {
        /// Corrupt a component to confirm the suite notices (`duality`).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn load(path: &Path, expected: ExperimentKind) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::from_file(path)?;
    if cfg.experiment != expected {
        return Err(Error::Config(format!(
            "{} declares experiment `{}` but was passed to `{}`",
            path.display(),
            cfg.experiment.name(),
            expected.name()
        )));
    }
    Ok(cfg)
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Train { config } => {
            let cfg = load(&config, ExperimentKind::Train)?;
            let outcome = train::run_train(&cfg)?;
            for e in &outcome.epochs {
                println!(
                    "epoch {:>3}  train loss {:.4}  test loss {:.4}  test acc {:.4}",
                    e.epoch, e.mean_train_loss, e.test_loss, e.test_accuracy
                );
            }
            println!("wrote {}", cfg.output_dir.join("metrics.csv").display());
        }
        Command::Rosenbrock { config } => {
            let cfg = load(&config, ExperimentKind::Rosenbrock)?;
            let trajectories = rosenbrock::run_rosenbrock(&cfg)?;
            print!("{}", rosenbrock::describe(&trajectories));
        }
        Command::SpikeGrid { config } => {
            let cfg = load(&config, ExperimentKind::SpikeGrid)?;
            for c in grid::run_spike_grid(&cfg)? {
                println!(
                    "lr {:<8} period {:<4} factor {:<5} acc {:.4} loss {:.4}{}",
                    c.base_lr,
                    c.period,
                    c.factor,
                    c.final_test_accuracy,
                    c.final_test_loss,
                    if c.diverged { " (diverged)" } else { "" }
                );
            }
        }
        Command::BiasVariance { config } => {
            let cfg = load(&config, ExperimentKind::BiasVariance)?;
            for s in bias_variance::run_bias_variance(&cfg)?.shapes {
                let d = &s.decomposition;
                println!("{:<7} bias {:.6e}  variance {:.6e}", s.shape.name(), d.bias, d.variance);
            }
        }
        Command::Sweep { config } => {
            let cfg = load(&config, ExperimentKind::Sweep)?;
            for c in grid::run_sweep(&cfg)? {
                println!(
                    "{:<10} lr {:<8} test loss {:.4} acc {:.4}{}",
                    c.optimizer,
                    c.lr,
                    c.final_test_loss,
                    c.final_test_accuracy,
                    if c.winner { "  <- winner" } else { "" }
                );
            }
        }
        Command::Project {
            in_dir,
            out_file,
            dim,
            seed,
        } => {
            data::run_project(&in_dir, &out_file, dim, seed)?;
            println!("wrote {}", out_file.display());
        }
        Command::Check { inject_fault } => {
            let faults = match inject_fault.as_deref() {
                None => Faults::default(),
                Some("duality") => Faults { corrupt_duality: true },
                Some(other) => {
                    eprintln!("error: unknown fault `{other}`");
                    return Ok(EXIT_CONFIG);
                }
            };
            let report = run_check_with(faults);
            print!("{}", report.render());
            if !report.all_passed() {
                eprintln!("failed checks: {}", report.failures().join(", "));
                return Ok(EXIT_INVARIANT);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
