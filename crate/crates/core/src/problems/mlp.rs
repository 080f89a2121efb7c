//! Fully connected ReLU network with softmax cross-entropy and hand-written
//! backpropagation.
//!
//! Each layer is a `d_out x (d_in + 1)` matrix: the inputs get a constant 1
//! appended so the bias lives in the last column. The backward pass keeps
//! the per-example activities `ā` and pre-activation gradients `δ` that the
//! Kronecker-factored optimizers consume.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::param::{ParamBlock, Role};

/// Per-layer quantities of one mini-batch, one row per example.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Layer inputs with the homogeneous coordinate, `B x (d_in + 1)`.
    pub a_bar: Matrix,
    /// Pre-activations `s = W ā`, `B x d_out`.
    pub pre: Matrix,
    /// Per-example `∂ℓ/∂s`, `B x d_out` (not divided by the batch size).
    pub delta: Matrix,
}

impl LayerCache {
    pub fn batch_size(&self) -> usize {
        self.a_bar.nrows()
    }

    /// Mean over the batch of `δ āᵀ`.
    pub fn gradient(&self) -> Matrix {
        self.delta.tr_mul(&self.a_bar) / self.batch_size() as f64
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub layers: Vec<LayerCache>,
}

/// Forward quantities before any loss gradient is known.
#[derive(Debug, Clone)]
pub struct Forward {
    pub a_bar: Vec<Matrix>,
    pub pre: Vec<Matrix>,
    /// Softmax probabilities, `B x classes`.
    pub probs: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardBackward {
    pub loss: f64,
    pub grads: Vec<Matrix>,
    pub cache: ForwardCache,
    pub probs: Matrix,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    dims: Vec<usize>,
}

fn with_bias_column(a: &Matrix) -> Matrix {
    let d = a.ncols();
    a.clone().insert_column(d, 1.0)
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for mut row in p.row_iter_mut() {
        let max = row.max();
        row.apply(|x| *x = (*x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    p
}

fn log_sum_exp(row: nalgebra::DVectorView<'_, f64>) -> f64 {
    let max = row.max();
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl Mlp {
    /// `dims = [d_in, h_1, ..., classes]`.
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("invalid layer dimensions {dims:?}")));
        }
        Ok(Mlp { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.dims.windows(2).map(|w| (w[1], w[0] + 1)).collect()
    }

    /// He-normal weights and zero biases. The last layer is tagged as the
    /// output head, every other layer as a hidden matrix.
    pub fn init_blocks(&self, seed: u64) -> Vec<ParamBlock> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.num_layers();
        self.layer_shapes()
            .into_iter()
            .enumerate()
            .map(|(l, (d_out, cols))| {
                let d_in = cols - 1;
                let normal = Normal::new(0.0, (2.0 / d_in as f64).sqrt()).expect("valid std");
                let w = Matrix::from_fn(d_out, cols, |_, j| {
                    if j == d_in {
                        0.0
                    } else {
                        normal.sample(&mut rng)
                    }
                });
                let role = if l + 1 == n {
                    Role::OutputHead
                } else {
                    Role::HiddenMatrix
                };
                ParamBlock::matrix(format!("layer{l}"), role, w)
            })
            .collect()
    }

    fn check_weights(&self, weights: &[&Matrix]) -> Result<()> {
        if weights.len() != self.num_layers() {
            return Err(Error::Shape(format!(
                "expected {} weight matrices, got {}",
                self.num_layers(),
                weights.len()
            )));
        }
        for (l, (w, shape)) in weights.iter().zip(self.layer_shapes()).enumerate() {
            if w.shape() != shape {
                return Err(Error::Shape(format!(
                    "layer {l}: expected {shape:?}, got {:?}",
                    w.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, weights: &[&Matrix], x: &Matrix) -> Result<Forward> {
        self.check_weights(weights)?;
        if x.nrows() == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if x.ncols() != self.dims[0] {
            return Err(Error::Shape(format!(
                "feature dimension {} does not match model input {}",
                x.ncols(),
                self.dims[0]
            )));
        }
        let n = self.num_layers();
        let mut a_bars = Vec::with_capacity(n);
        let mut pres = Vec::with_capacity(n);
        let mut a = x.clone();
        for (l, w) in weights.iter().enumerate() {
            let a_bar = with_bias_column(&a);
            let s = &a_bar * w.transpose();
            if l + 1 < n {
                a = s.map(|v| v.max(0.0));
            }
            a_bars.push(a_bar);
            pres.push(s);
        }
        let probs = softmax_rows(pres.last().unwrap());
        Ok(Forward {
            a_bar: a_bars,
            pre: pres,
            probs,
        })
    }

    /// Backpropagates a per-example output signal through the network.
    pub fn backward(&self, weights: &[&Matrix], fwd: Forward, delta_out: Matrix) -> (Vec<Matrix>, ForwardCache) {
        let n = self.num_layers();
        let mut deltas = vec![Matrix::zeros(0, 0); n];
        deltas[n - 1] = delta_out;
        for l in (1..n).rev() {
            let d_in = self.dims[l];
            let back = &deltas[l] * weights[l];
            let mut d = back.columns(0, d_in).into_owned();
            // ReLU subgradient at 0 is 0.
            d.zip_apply(&fwd.pre[l - 1], |g, s| {
                if s <= 0.0 {
                    *g = 0.0
                }
            });
            deltas[l - 1] = d;
        }
        let layers: Vec<LayerCache> = fwd
            .a_bar
            .into_iter()
            .zip(fwd.pre)
            .zip(deltas)
            .map(|((a_bar, pre), delta)| LayerCache { a_bar, pre, delta })
            .collect();
        let grads = layers.iter().map(LayerCache::gradient).collect();
        (grads, ForwardCache { layers })
    }

    fn check_labels(&self, y: &[usize], rows: usize) -> Result<()> {
        if y.len() != rows {
            return Err(Error::Shape(format!("{} labels for {rows} rows", y.len())));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= self.classes()) {
            return Err(Error::Shape(format!("label {bad} out of range")));
        }
        Ok(())
    }

    /// Mean cross-entropy, per-layer gradients and the curvature cache.
    pub fn forward_backward(&self, weights: &[&Matrix], x: &Matrix, y: &[usize]) -> Result<ForwardBackward> {
        self.check_labels(y, x.nrows())?;
        let fwd = self.forward(weights, x)?;
        let logits = fwd.pre.last().unwrap();
        let loss = logits
            .row_iter()
            .zip(y)
            .map(|(row, &c)| log_sum_exp(row.transpose().as_view()) - row[c])
            .sum::<f64>()
            / x.nrows() as f64;
        let probs = fwd.probs.clone();
        let mut delta = probs.clone();
        for (i, &c) in y.iter().enumerate() {
            delta[(i, c)] -= 1.0;
        }
        let (grads, cache) = self.backward(weights, fwd, delta);
        Ok(ForwardBackward {
            loss,
            grads,
            cache,
            probs,
        })
    }

    pub fn forward_backward_blocks(&self, blocks: &[ParamBlock], x: &Matrix, y: &[usize]) -> Result<ForwardBackward> {
        let weights: Vec<&Matrix> = blocks.iter().map(|b| &b.values).collect();
        self.forward_backward(&weights, x, y)
    }

    /// Mean cross-entropy and accuracy.
    pub fn evaluate(&self, weights: &[&Matrix], x: &Matrix, y: &[usize]) -> Result<(f64, f64)> {
        self.check_labels(y, x.nrows())?;
        let fwd = self.forward(weights, x)?;
        let logits = fwd.pre.last().unwrap();
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (row, &c) in logits.row_iter().zip(y) {
            loss += log_sum_exp(row.transpose().as_view()) - row[c];
            if row.transpose().argmax().0 == c {
                correct += 1;
            }
        }
        let n = x.nrows() as f64;
        Ok((loss / n, correct as f64 / n))
    }

    pub fn loss(&self, weights: &[&Matrix], x: &Matrix, y: &[usize]) -> Result<f64> {
        self.evaluate(weights, x, y).map(|(l, _)| l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn zero_weights_give_uniform_prediction() {
        let mlp = Mlp::new(vec![5, 4, 10]).unwrap();
        let ws: Vec<Matrix> = mlp.layer_shapes().iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        let refs: Vec<&Matrix> = ws.iter().collect();
        let x = gaussian(3, 5, 1);
        let fb = mlp.forward_backward(&refs, &x, &[0, 3, 9]).unwrap();
        assert!((fb.loss - 10f64.ln()).abs() < 1e-12);
        assert!(fb.probs.iter().all(|&p| (p - 0.1).abs() < 1e-15));
    }

    #[test]
    fn output_delta_is_softmax_minus_onehot() {
        let mlp = Mlp::new(vec![3, 4, 3]).unwrap();
        let blocks = mlp.init_blocks(2);
        let x = gaussian(1, 3, 3);
        let fb = mlp.forward_backward_blocks(&blocks, &x, &[1]).unwrap();
        let delta = &fb.cache.layers[1].delta;
        for c in 0..3 {
            let expect = fb.probs[(0, c)] - if c == 1 { 1.0 } else { 0.0 };
            assert_eq!(delta[(0, c)], expect);
        }
    }

    #[test]
    fn cache_gradient_is_bitwise_the_returned_gradient() {
        let mlp = Mlp::new(vec![4, 3, 3, 2]).unwrap();
        let blocks = mlp.init_blocks(5);
        let x = gaussian(7, 4, 6);
        let y = [0, 1, 1, 0, 1, 0, 0];
        let fb = mlp.forward_backward_blocks(&blocks, &x, &y).unwrap();
        for (g, layer) in fb.grads.iter().zip(&fb.cache.layers) {
            assert_eq!(*g, layer.gradient());
            assert_eq!(layer.a_bar.column(layer.a_bar.ncols() - 1).iter().all(|&v| v == 1.0), true);
        }
    }

    #[test]
    fn dimension_mismatch_errors() {
        let mlp = Mlp::new(vec![4, 2]).unwrap();
        let blocks = mlp.init_blocks(0);
        assert!(matches!(
            mlp.forward_backward_blocks(&blocks, &gaussian(2, 3, 0), &[0, 1]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            mlp.forward_backward_blocks(&blocks, &gaussian(2, 4, 0), &[0, 2]),
            Err(Error::Shape(_))
        ));
        assert!(Mlp::new(vec![4]).is_err());
    }

    #[test]
    fn init_roles_and_shapes() {
        let mlp = Mlp::new(vec![256, 256, 256, 10]).unwrap();
        let blocks = mlp.init_blocks(0);
        assert_eq!(blocks.len(), 3);
        assert_eq!(blocks[0].values.shape(), (256, 257));
        assert_eq!(blocks[2].values.shape(), (10, 257));
        assert_eq!(blocks[1].role, Role::HiddenMatrix);
        assert_eq!(blocks[2].role, Role::OutputHead);
        assert!(blocks[0].values.column(256).iter().all(|&b| b == 0.0));
    }
}
