//! Multi-layer perceptron with ReLU hidden activations and linear output.

use super::{Parameterized, Scalar, Tensor2};
use crate::error::{Error, Result};
use rand::Rng;

/// Uniform init scaled by fan-in/fan-out: `±sqrt(6/(fan_in+fan_out))`.
pub fn uniform_init<S: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor2<S> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(S::from_f64(rng.gen_range(-bound..bound)));
    }
    Tensor2::from_vec(rows, cols, data)
}

/// Zeroes the entries of `grad` wherever the matching activation was clipped
/// by ReLU (activation == 0 means the pre-activation was <= 0).
pub fn relu_mask_inplace<S: Scalar>(grad: &mut Tensor2<S>, activation: &Tensor2<S>) {
    for (g, &a) in grad.data_mut().iter_mut().zip(activation.data()) {
        if a <= S::zero() {
            *g = S::zero();
        }
    }
}

/// Per-layer weight matrices and bias vectors. Hidden layers apply ReLU,
/// the final layer is linear. The default shape everywhere in this crate is
/// one hidden layer of width 32.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<S> {
    pub weights: Vec<Tensor2<S>>,
    pub biases: Vec<Vec<S>>,
}

/// Layer inputs recorded during [`MlpParams::forward_cached`], consumed by
/// the backward pass.
pub struct MlpCache<S> {
    /// `inputs[k]` is what layer `k` consumed; `inputs[0]` is the raw input.
    inputs: Vec<Tensor2<S>>,
}

impl<S: Scalar> MlpParams<S> {
    /// Random init for the layer widths in `dims` (at least `[in, out]`).
    pub fn init(dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            weights.push(uniform_init(w[0], w[1], rng));
            biases.push(vec![S::zero(); w[1]]);
        }
        MlpParams { weights, biases }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            weights.push(Tensor2::zeros(w[0], w[1]));
            biases.push(vec![S::zero(); w[1]]);
        }
        MlpParams { weights, biases }
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams {
            weights: self
                .weights
                .iter()
                .map(|w| Tensor2::zeros(w.rows(), w.cols()))
                .collect(),
            biases: self.biases.iter().map(|b| vec![S::zero(); b.len()]).collect(),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.weights[0].rows()];
        d.extend(self.weights.iter().map(|w| w.cols()));
        d
    }

    pub fn in_width(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn out_width(&self) -> usize {
        self.weights.last().unwrap().cols()
    }

    /// Checks that consecutive layer dimensions chain and biases match.
    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.len() != self.biases.len() {
            return Err(Error::Shape("MLP layer count".into()));
        }
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if b.len() != w.cols() {
                return Err(Error::Shape(format!("MLP layer {k}: bias width {} != {}", b.len(), w.cols())));
            }
            if k > 0 && self.weights[k - 1].cols() != w.rows() {
                return Err(Error::Shape(format!(
                    "MLP layers {}->{k}: {} != {}",
                    k - 1,
                    self.weights[k - 1].cols(),
                    w.rows()
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor2<S>) -> Result<Tensor2<S>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor2<S>) -> Result<(Tensor2<S>, MlpCache<S>)> {
        if x.cols() != self.in_width() {
            return Err(Error::Shape(format!(
                "MLP input width {} != expected {}",
                x.cols(),
                self.in_width()
            )));
        }
        let n_layers = self.weights.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut cur = x.clone();
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut pre = cur.matmul(w);
            pre.add_row_broadcast(b);
            inputs.push(cur);
            cur = if k + 1 < n_layers {
                pre.map(|v| v.max(S::zero()))
            } else {
                pre
            };
        }
        Ok((cur, MlpCache { inputs }))
    }

    /// Backprop through the cached forward. Returns the parameter gradients
    /// (same shape as `self`) and the gradient w.r.t. the input.
    pub fn backward(&self, cache: &MlpCache<S>, d_out: &Tensor2<S>) -> (MlpParams<S>, Tensor2<S>) {
        let mut grads = self.zeros_like();
        let mut g = d_out.clone();
        for k in (0..self.weights.len()).rev() {
            let layer_in = &cache.inputs[k];
            grads.weights[k] = layer_in.transposed_matmul(&g);
            grads.biases[k] = g.col_sums();
            g = g.matmul_transpose_rhs(&self.weights[k]);
            if k > 0 {
                // cache.inputs[k] is the ReLU output feeding layer k
                relu_mask_inplace(&mut g, layer_in);
            }
        }
        (grads, g)
    }
}

impl<S: Scalar> Parameterized<S> for MlpParams<S> {
    fn blocks(&self) -> Vec<&[S]> {
        let mut out = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.data());
            out.push(b.as_slice());
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [S]> {
        let mut out = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.data_mut());
            out.push(b.as_mut_slice());
        }
        out
    }
}
