pub mod data;
pub mod mlp;
pub mod rosenbrock;
