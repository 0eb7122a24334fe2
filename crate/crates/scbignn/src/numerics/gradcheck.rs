//! Central-difference verification of analytic gradients. 64-bit only.

use super::Parameterized;
use crate::error::{Error, Result};

/// Compares `analytic` against central finite differences of `loss` at
/// `params`, returning the max over parameters of
/// `|analytic - fd| / max(1, |analytic|)`.
///
/// `params` is restored to its original values before returning.
pub fn grad_check<P, F>(params: &mut P, analytic: &P, eps: f64, mut loss: F) -> Result<f64>
where
    P: Parameterized<f64>,
    F: FnMut(&P) -> Result<f64>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Validation(format!(
            "grad_check eps {eps} outside [1e-7, 1e-4]"
        )));
    }
    let n_blocks = params.blocks().len();
    if n_blocks != analytic.blocks().len() {
        return Err(Error::Shape("analytic gradient block count".into()));
    }

    let mut max_rel: f64 = 0.0;
    for bi in 0..n_blocks {
        let block_len = params.blocks()[bi].len();
        for i in 0..block_len {
            let orig = params.blocks()[bi][i];

            params.blocks_mut()[bi][i] = orig + eps;
            let plus = loss(params)?;
            params.blocks_mut()[bi][i] = orig - eps;
            let minus = loss(params)?;
            params.blocks_mut()[bi][i] = orig;

            let fd = (plus - minus) / (2.0 * eps);
            let a = analytic.blocks()[bi][i];
            let rel = (a - fd).abs() / f64::max(1.0, a.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
