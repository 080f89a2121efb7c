//! Parameter containers, per-step context and gradient telemetry.

use crate::linalg::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Matrix { d_out: usize, d_in: usize },
    Vector { d: usize },
}

/// What a block does in the network. Some optimizers only own
/// hidden matrices and hand everything else to a fallback rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    HiddenMatrix,
    InputEmbedding,
    OutputHead,
    BiasVector,
}

/// One trainable tensor. Vectors are stored as `d x 1` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub id: String,
    pub kind: BlockKind,
    pub role: Role,
    pub values: Matrix,
    pub grad: Matrix,
}

impl ParamBlock {
    pub fn matrix(id: impl Into<String>, role: Role, values: Matrix) -> Self {
        let (d_out, d_in) = values.shape();
        ParamBlock {
            id: id.into(),
            kind: BlockKind::Matrix { d_out, d_in },
            role,
            grad: Matrix::zeros(d_out, d_in),
            values,
        }
    }

    pub fn vector(id: impl Into<String>, role: Role, values: Vector) -> Self {
        let d = values.len();
        let values = Matrix::from_column_slice(d, 1, values.as_slice());
        ParamBlock {
            id: id.into(),
            kind: BlockKind::Vector { d },
            role,
            grad: Matrix::zeros(d, 1),
            values,
        }
    }

    pub fn is_matrix(&self) -> bool {
        matches!(self.kind, BlockKind::Matrix { .. })
    }

    pub fn is_hidden_matrix(&self) -> bool {
        self.is_matrix() && self.role == Role::HiddenMatrix
    }

    pub fn set_grad(&mut self, grad: Matrix) {
        assert_eq!(
            grad.shape(),
            self.values.shape(),
            "gradient shape must match block `{}`",
            self.id
        );
        self.grad = grad;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }
}

/// Per-step scalars supplied by the training loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepContext {
    /// Step index, starting at 1.
    pub t: u64,
    pub epoch: u64,
    pub lr: f64,
    pub wd: f64,
    pub seed: u64,
}

impl StepContext {
    pub fn new(t: u64, lr: f64, wd: f64) -> Self {
        assert!(t >= 1, "steps are numbered from 1");
        StepContext {
            t,
            epoch: 0,
            lr,
            wd,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradStats {
    pub global_grad_norm: f64,
    pub global_weight_norm: f64,
    pub per_block_grad_norm: Vec<f64>,
    pub per_block_weight_norm: Vec<f64>,
    /// `‖G‖ / ‖W‖`, absent for blocks with zero weight norm.
    pub per_block_ratio: Vec<Option<f64>>,
    /// `sqrt(2 λ_t / η_t)`, absent when `η_t = 0`.
    pub equilibrium_target: Option<f64>,
}

impl GradStats {
    pub fn max_ratio(&self) -> Option<f64> {
        self.per_block_ratio
            .iter()
            .flatten()
            .copied()
            .fold(None, |acc, r| Some(acc.map_or(r, |a: f64| a.max(r))))
    }
}

pub fn grad_stats(blocks: &[ParamBlock], ctx: &StepContext) -> GradStats {
    let per_block_grad_norm: Vec<f64> = blocks.iter().map(|b| b.grad.norm()).collect();
    let per_block_weight_norm: Vec<f64> = blocks.iter().map(|b| b.values.norm()).collect();
    let per_block_ratio = per_block_grad_norm
        .iter()
        .zip(&per_block_weight_norm)
        .map(|(&g, &w)| (w > 0.0).then(|| g / w))
        .collect();
    let global_grad_norm = per_block_grad_norm.iter().map(|n| n * n).sum::<f64>().sqrt();
    let global_weight_norm = per_block_weight_norm.iter().map(|n| n * n).sum::<f64>().sqrt();
    let equilibrium_target = (ctx.lr > 0.0).then(|| (2.0 * ctx.wd / ctx.lr).sqrt());
    GradStats {
        global_grad_norm,
        global_weight_norm,
        per_block_grad_norm,
        per_block_weight_norm,
        per_block_ratio,
        equilibrium_target,
    }
}

/// Concatenates the values of all blocks (column-major within each block).
pub fn flatten_values(blocks: &[ParamBlock]) -> Vector {
    Vector::from_iterator(
        blocks.iter().map(|b| b.values.len()).sum(),
        blocks.iter().flat_map(|b| b.values.iter().copied()),
    )
}

pub fn flatten_grads(blocks: &[ParamBlock]) -> Vector {
    Vector::from_iterator(
        blocks.iter().map(|b| b.grad.len()).sum(),
        blocks.iter().flat_map(|b| b.grad.iter().copied()),
    )
}

/// Splits a flat vector into matrices shaped like `blocks`.
pub fn unflatten_like(blocks: &[ParamBlock], flat: &Vector) -> Vec<Matrix> {
    let mut offset = 0;
    blocks
        .iter()
        .map(|b| {
            let (r, c) = b.values.shape();
            let m = Matrix::from_column_slice(r, c, &flat.as_slice()[offset..offset + r * c]);
            offset += r * c;
            m
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients() {
        let b = ParamBlock::matrix("w", Role::HiddenMatrix, Matrix::identity(2, 2));
        let s = grad_stats(&[b], &StepContext::new(1, 0.1, 0.0));
        assert_eq!(s.global_grad_norm, 0.0);
    }

    #[test]
    fn ratio_and_target() {
        let mut b = ParamBlock::vector("w", Role::BiasVector, Vector::from_vec(vec![2.0, 0.0]));
        b.set_grad(Matrix::from_column_slice(2, 1, &[0.0, 3.0]));
        let s = grad_stats(&[b], &StepContext::new(1, 0.05, 0.1));
        assert_eq!(s.per_block_ratio, vec![Some(1.5)]);
        assert!((s.equilibrium_target.unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_report_absent_ratio() {
        let mut b = ParamBlock::vector("w", Role::BiasVector, Vector::zeros(2));
        b.set_grad(Matrix::from_column_slice(2, 1, &[1.0, 1.0]));
        let s = grad_stats(&[b], &StepContext::new(1, 0.0, 0.1));
        assert_eq!(s.per_block_ratio, vec![None]);
        assert_eq!(s.equilibrium_target, None);
        assert_eq!(s.max_ratio(), None);
    }

    #[test]
    fn flatten_round_trip() {
        let a = ParamBlock::matrix("a", Role::HiddenMatrix, Matrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64));
        let b = ParamBlock::vector("b", Role::BiasVector, Vector::from_vec(vec![7.0, 8.0]));
        let blocks = vec![a, b];
        let flat = flatten_values(&blocks);
        assert_eq!(flat.len(), 8);
        let back = unflatten_like(&blocks, &flat);
        assert_eq!(back[0], blocks[0].values);
        assert_eq!(back[1], blocks[1].values);
    }
}
