//! Experiment runner for the optimizer zoo.
//!
//! Each subcommand of the `optzoo` binary has a library entry point here so
//! tests can drive experiments in memory.

pub mod bias_variance;
pub mod check;
pub mod config;
pub mod data;
pub mod grid;
pub mod metrics;
pub mod rosenbrock;
pub mod train;

pub use config::{ExperimentConfig, ExperimentKind, OptimizerSpec};
pub use metrics::{MetricsRow, METRICS_COLUMNS};
pub use train::{run_train, Session, TrainOutcome};

use optzoo_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INGESTION: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_INVARIANT: i32 = 5;

/// Process exit code for an error. Numerical failures inside a run count
/// as divergence; shape mismatches come from inconsistent configuration.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::ScheduleExhausted { .. } | Error::Sequencing(_) | Error::Shape(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Ingestion { .. } | Error::CorruptLabel { .. } => EXIT_INGESTION,
        Error::Divergence { .. }
        | Error::NonFinite(_)
        | Error::Singular { .. }
        | Error::Degenerate(_)
        | Error::Curvature { .. } => EXIT_DIVERGENCE,
    }
}
