//! Optimizer zoo, training-control tools and test problems for numerical
//! optimization experiments on small neural networks.

pub mod curvature;
pub mod error;
pub mod first_order;
pub mod hessian;
pub mod linalg;
pub mod modular;
pub mod optimizer;
pub mod param;
pub mod problems;
pub mod schedule;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
pub use optimizer::{Algorithm, Optimizer, StepInputs};
pub use param::{grad_stats, BlockKind, GradStats, ParamBlock, Role, StepContext};
pub use problems::mlp::{ForwardCache, Mlp};
