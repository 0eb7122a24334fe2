//! Framework-free dense tensor operations, differentiable layers, optimizer,
//! and gradient verification underpinning both GNN modules.
//!
//! Everything is generic over [`Scalar`]: `f32` for training, `f64` for
//! verification (gradient checks, oracle comparisons).

mod gradcheck;
mod mlp;
mod optim;
mod tensor;

pub use gradcheck::grad_check;
pub use mlp::{relu_mask_inplace, uniform_init, MlpCache, MlpParams};
pub use optim::{OptimizerState, UpdateRule};
pub use tensor::Tensor2;

use crate::error::{Error, Result};
use std::fmt;
use std::iter::Sum;

/// Probability clamp for `log` arguments, guarding against `log y` with `y`
/// approaching zero on near one-hot distributions.
pub const LOG_CLAMP: f64 = 1e-12;

/// Floating-point element type. 32-bit is the training default; 64-bit is
/// used wherever gradients are verified against finite differences.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Anything exposing its learnable parameters as a fixed-order list of flat
/// blocks. Gradients are carried in a second value of the same type, so
/// parameter/gradient pairs always zip block by block.
pub trait Parameterized<S: Scalar> {
    fn blocks(&self) -> Vec<&[S]>;
    fn blocks_mut(&mut self) -> Vec<&mut [S]>;

    fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }
}

/// FNV-1a over the bit patterns of every parameter. Used by the trainer to
/// prove that a phase did not touch the frozen model.
pub fn param_checksum<S: Scalar, P: Parameterized<S>>(p: &P) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for block in p.blocks() {
        for &v in block {
            for byte in v.as_f64().to_bits().to_le_bytes() {
                hash ^= u64::from(byte);
                hash = hash.wrapping_mul(0x100000001b3);
            }
        }
    }
    hash
}

/// Row-wise softmax, numerically stabilized by row-max subtraction.
pub fn softmax_rows<S: Scalar>(m: &Tensor2<S>) -> Result<Tensor2<S>> {
    m.ensure_finite("softmax input")?;
    let mut out = m.clone();
    softmax_rows_inplace(&mut out);
    Ok(out)
}

/// In-place variant for hot paths; assumes the caller already knows the
/// input is finite.
pub fn softmax_rows_inplace<S: Scalar>(m: &mut Tensor2<S>) {
    for row in m.rows_mut() {
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn validate_target_rows<S: Scalar>(targets: &Tensor2<S>) -> Result<()> {
    for (i, row) in targets.rows_iter().enumerate() {
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::Validation(format!(
                "target row {i} sums to {sum}, expected 1 within 1e-5"
            )));
        }
    }
    Ok(())
}

/// Mean over rows of `-Σ_c target · log softmax(logits)`.
pub fn cross_entropy<S: Scalar>(pred_logits: &Tensor2<S>, target_dist: &Tensor2<S>) -> Result<S> {
    let (loss, _) = cross_entropy_with_grad(pred_logits, target_dist, None)?;
    Ok(loss)
}

/// Cross-entropy together with its gradient w.r.t. the logits.
///
/// `weights`, when given, holds one multiplier per row; the loss is
/// `Σ_i w_i · CE_i` and the gradient rows scale accordingly. Without
/// weights every row gets `1/rows` (the plain mean).
pub fn cross_entropy_with_grad<S: Scalar>(
    pred_logits: &Tensor2<S>,
    target_dist: &Tensor2<S>,
    weights: Option<&[S]>,
) -> Result<(S, Tensor2<S>)> {
    if pred_logits.rows() != target_dist.rows() || pred_logits.cols() != target_dist.cols() {
        return Err(Error::Shape(format!(
            "logits {}x{} vs targets {}x{}",
            pred_logits.rows(),
            pred_logits.cols(),
            target_dist.rows(),
            target_dist.cols()
        )));
    }
    if let Some(w) = weights {
        if w.len() != pred_logits.rows() {
            return Err(Error::Shape("weight count != row count".into()));
        }
    }
    validate_target_rows(target_dist)?;

    let probs = softmax_rows(pred_logits)?;
    let clamp = S::from_f64(LOG_CLAMP);
    let default_w = S::from_f64(1.0 / pred_logits.rows().max(1) as f64);

    let mut loss = S::zero();
    let mut grad = Tensor2::zeros(pred_logits.rows(), pred_logits.cols());
    for i in 0..pred_logits.rows() {
        let w = weights.map_or(default_w, |ws| ws[i]);
        let p = probs.row(i);
        let t = target_dist.row(i);
        let g = grad.row_mut(i);
        for c in 0..p.len() {
            loss -= w * t[c] * p[c].max(clamp).ln();
            g[c] = w * (p[c] - t[c]);
        }
    }
    Ok((loss, grad))
}
