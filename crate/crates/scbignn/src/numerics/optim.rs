//! Parameter update rules: plain gradient descent and the adaptive
//! moment-based default.

use super::{Parameterized, Scalar};

/// Which update rule [`OptimizerState::step`] applies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UpdateRule {
    /// `p <- p - lr * g`, exactly.
    Plain,
    /// Moment-corrected adaptive update (beta1 0.9, beta2 0.999, eps 1e-8).
    Adaptive,
}

/// Learning rate, per-parameter first/second moment accumulators, and a step
/// counter. Moments are allocated lazily on the first step so one state can
/// be constructed before the model shapes are known.
#[derive(Clone, Debug)]
pub struct OptimizerState<S> {
    pub lr: f64,
    pub rule: UpdateRule,
    step: u64,
    skipped: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl<S: Scalar> OptimizerState<S> {
    pub fn new(lr: f64, rule: UpdateRule) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        OptimizerState {
            lr,
            rule,
            step: 0,
            skipped: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Steps skipped because a gradient was non-finite.
    pub fn skipped_count(&self) -> u64 {
        self.skipped
    }

    /// Applies one update. A non-finite gradient skips the step (parameters
    /// and moments untouched) and logs the event; returns whether the step
    /// was applied.
    pub fn step<P: Parameterized<S>>(&mut self, params: &mut P, grads: &P) -> bool {
        let grad_blocks = grads.blocks();
        let finite = grad_blocks
            .iter()
            .all(|b| b.iter().all(|g| g.is_finite()));
        if !finite {
            self.skipped += 1;
            log::warn!("optimizer: non-finite gradient, step skipped");
            return false;
        }

        if self.m.is_empty() {
            self.m = grad_blocks.iter().map(|b| vec![S::zero(); b.len()]).collect();
            self.v = grad_blocks.iter().map(|b| vec![S::zero(); b.len()]).collect();
        }
        self.step += 1;

        let lr = S::from_f64(self.lr);
        let mut param_blocks = params.blocks_mut();
        assert_eq!(param_blocks.len(), grad_blocks.len(), "param/grad block count");

        match self.rule {
            UpdateRule::Plain => {
                for (pb, gb) in param_blocks.iter_mut().zip(&grad_blocks) {
                    for (p, &g) in pb.iter_mut().zip(gb.iter()) {
                        *p -= lr * g;
                    }
                }
            }
            UpdateRule::Adaptive => {
                let b1 = S::from_f64(BETA1);
                let b2 = S::from_f64(BETA2);
                let eps = S::from_f64(EPS);
                let corr1 = S::from_f64(1.0 - BETA1.powi(self.step as i32));
                let corr2 = S::from_f64(1.0 - BETA2.powi(self.step as i32));
                for ((pb, gb), (mb, vb)) in param_blocks
                    .iter_mut()
                    .zip(&grad_blocks)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    for (((p, &g), m), v) in
                        pb.iter_mut().zip(gb.iter()).zip(mb.iter_mut()).zip(vb.iter_mut())
                    {
                        *m = b1 * *m + (S::one() - b1) * g;
                        *v = b2 * *v + (S::one() - b2) * g * g;
                        let m_hat = *m / corr1;
                        let v_hat = *v / corr2;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        true
    }
}
