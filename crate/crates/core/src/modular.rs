//! Steepest descent under per-block operator norms.
//!
//! Each block is assigned a norm and a weight `s`. The dual norm measures a
//! gradient, the duality map turns it into a unit-norm step direction, and
//! the modular step combines blocks with the weights.

use crate::error::{Error, Result};
use crate::first_order::sign0;
use crate::linalg::{svd, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormKind {
    /// Frobenius / ℓ2 over all entries.
    Euclid,
    /// ℓ1 → ℓ∞ operator norm, the largest absolute entry.
    MaxOfMax,
    /// ℓ2 → ℓ2 operator norm.
    Spectral,
    /// Spectral norm rescaled by `√(d_in / d_out)`.
    RmsToRms { d_out: usize, d_in: usize },
}

impl NormKind {
    pub fn rms_to_rms(d_out: usize, d_in: usize) -> Result<Self> {
        if d_out == 0 || d_in == 0 {
            return Err(Error::Config("rms-to-rms dimensions must be positive".into()));
        }
        Ok(NormKind::RmsToRms { d_out, d_in })
    }

    fn check(&self, g: &Matrix) -> Result<()> {
        match *self {
            NormKind::RmsToRms { d_out, d_in } if g.shape() != (d_out, d_in) => Err(Error::Shape(format!(
                "rms-to-rms norm for {d_out}x{d_in} applied to {:?}",
                g.shape()
            ))),
            _ => Ok(()),
        }
    }
}

fn top_singular(g: &Matrix) -> Result<f64> {
    Ok(svd(g)?.sigma.iter().copied().fold(0.0, f64::max))
}

fn nuclear(g: &Matrix) -> Result<f64> {
    Ok(svd(g)?.sigma.sum())
}

fn rms_scale(d_out: usize, d_in: usize) -> f64 {
    (d_out as f64 / d_in as f64).sqrt()
}

pub fn primal_norm(w: &Matrix, kind: NormKind) -> Result<f64> {
    kind.check(w)?;
    Ok(match kind {
        NormKind::Euclid => w.norm(),
        NormKind::MaxOfMax => w.amax(),
        NormKind::Spectral => top_singular(w)?,
        NormKind::RmsToRms { d_out, d_in } => top_singular(w)? / rms_scale(d_out, d_in),
    })
}

pub fn dual_norm(g: &Matrix, kind: NormKind) -> Result<f64> {
    kind.check(g)?;
    Ok(match kind {
        NormKind::Euclid => g.norm(),
        NormKind::MaxOfMax => g.iter().map(|x| x.abs()).sum(),
        NormKind::Spectral => nuclear(g)?,
        NormKind::RmsToRms { d_out, d_in } => rms_scale(d_out, d_in) * nuclear(g)?,
    })
}

/// Unit-norm maximiser of `⟨G, V⟩`. A zero gradient maps to zero.
pub fn dualize(g: &Matrix, kind: NormKind) -> Result<Matrix> {
    kind.check(g)?;
    if g.iter().all(|&x| x == 0.0) {
        return Ok(Matrix::zeros(g.nrows(), g.ncols()));
    }
    Ok(match kind {
        NormKind::Euclid => g / g.norm(),
        NormKind::MaxOfMax => g.map(sign0),
        NormKind::Spectral => svd(g)?.polar(),
        NormKind::RmsToRms { d_out, d_in } => svd(g)?.polar() * rms_scale(d_out, d_in),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockNorm {
    pub norm: NormKind,
    /// Weight `s > 0`; larger weights take proportionally smaller steps.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModularConfig {
    pub blocks: Vec<BlockNorm>,
    pub sharpness: f64,
}

impl ModularConfig {
    pub fn new(blocks: Vec<BlockNorm>, sharpness: f64) -> Result<Self> {
        if !(sharpness > 0.0) || blocks.iter().any(|b| !(b.weight > 0.0)) {
            return Err(Error::Config("modular weights and sharpness must be positive".into()));
        }
        Ok(ModularConfig { blocks, sharpness })
    }

    /// rms-to-rms for matrices with more than one column, max-of-max for
    /// vectors, unit weights.
    pub fn default_for(shapes: &[(usize, usize)], sharpness: f64) -> Result<Self> {
        let blocks = shapes
            .iter()
            .map(|&(r, c)| {
                Ok(BlockNorm {
                    norm: if c == 1 { NormKind::MaxOfMax } else { NormKind::rms_to_rms(r, c)? },
                    weight: 1.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ModularConfig::new(blocks, sharpness)
    }

    pub fn uniform(shapes: &[(usize, usize)], norm: NormKind, sharpness: f64) -> Result<Self> {
        ModularConfig::new(
            shapes.iter().map(|_| BlockNorm { norm, weight: 1.0 }).collect(),
            sharpness,
        )
    }
}

/// Shared step length `(1/λ) Σ_k dual_norm(G_k) / s_k`.
pub fn modular_step_size(grads: &[Matrix], cfg: &ModularConfig) -> Result<f64> {
    check_cover(grads, cfg)?;
    let mut total = 0.0;
    for (g, b) in grads.iter().zip(&cfg.blocks) {
        total += dual_norm(g, b.norm)? / b.weight;
    }
    Ok(total / cfg.sharpness)
}

fn check_cover(grads: &[Matrix], cfg: &ModularConfig) -> Result<()> {
    if grads.len() != cfg.blocks.len() {
        return Err(Error::Config(format!(
            "modular config covers {} blocks, got {} gradients",
            cfg.blocks.len(),
            grads.len()
        )));
    }
    Ok(())
}

/// Per-block updates `ΔW_l = -(η / s_l) dualize(G_l)` with the shared `η`
/// of [`modular_step_size`].
pub fn modular_step(grads: &[Matrix], cfg: &ModularConfig) -> Result<Vec<Matrix>> {
    let eta = modular_step_size(grads, cfg)?;
    grads
        .iter()
        .zip(&cfg.blocks)
        .map(|(g, b)| Ok(dualize(g, b.norm)? * (-eta / b.weight)))
        .collect()
}

/// Directions `-dualize(G_l) / s_l` without the shared step length.
pub fn modular_directions(grads: &[Matrix], cfg: &ModularConfig) -> Result<Vec<Matrix>> {
    check_cover(grads, cfg)?;
    grads
        .iter()
        .zip(&cfg.blocks)
        .map(|(g, b)| Ok(dualize(g, b.norm)? * (-1.0 / b.weight)))
        .collect()
}

/// `‖M‖_F² / ‖M‖₂²`, zero for the zero matrix.
pub fn stable_rank(m: &Matrix) -> Result<f64> {
    let top = top_singular(m)?;
    if top == 0.0 {
        return Ok(0.0);
    }
    Ok(m.norm_squared() / (top * top))
}
