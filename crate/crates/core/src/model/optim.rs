//! Adam with a one-cycle learning-rate schedule.

use std::f64::consts::PI;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{loss_and_grad, LossValue, ModelParameters, Objective, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One-cycle schedule: cosine warm-up from `base_lr` to `peak_factor * base_lr`
/// over the first `warmup_frac` of steps, then cosine decay to
/// `base_lr / final_div`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub base_lr: f64,
    pub peak_factor: f64,
    pub warmup_frac: f64,
    pub final_div: f64,
    pub total_steps: usize,
}

impl OneCycle {
    pub fn new(base_lr: f64, total_steps: usize) -> Self {
        Self {
            base_lr,
            peak_factor: 10.0,
            warmup_frac: 0.3,
            final_div: 100.0,
            total_steps,
        }
    }

    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.peak_factor
    }

    fn warmup_steps(&self) -> usize {
        ((self.total_steps as f64 * self.warmup_frac).round() as usize).min(self.total_steps)
    }

    /// Learning rate for the zero-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let peak = self.peak_lr();
        let end = self.base_lr / self.final_div;
        let warm = self.warmup_steps();
        if step < warm {
            let t = step as f64 / warm as f64;
            self.base_lr + (peak - self.base_lr) * (1.0 - (PI * t).cos()) / 2.0
        } else {
            let span = self.total_steps.saturating_sub(warm + 1).max(1) as f64;
            let t = ((step - warm) as f64 / span).min(1.0);
            end + (peak - end) * (1.0 + (PI * t).cos()) / 2.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub adam: AdamConfig,
    pub schedule: OneCycle,
    pub state: OptimizerState,
    /// Parameter ranges that are never updated.
    pub frozen: Vec<Range<usize>>,
}

impl Optimizer {
    pub fn new(n_params: usize, schedule: OneCycle) -> Self {
        Self {
            adam: AdamConfig::default(),
            schedule,
            state: OptimizerState::new(n_params),
            frozen: Vec::new(),
        }
    }

    pub fn freeze(&mut self, range: Range<usize>) {
        self.frozen.push(range);
    }

    /// Applies one Adam update and returns the learning rate used.
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64]) -> f64 {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.state.m.len());
        let lr = self.schedule.lr(self.state.step);
        self.state.step += 1;
        let t = self.state.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.adam;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut frozen = vec![false; params.len()];
        for r in &self.frozen {
            frozen[r.clone()].iter_mut().for_each(|f| *f = true);
        }
        for i in 0..params.len() {
            if frozen[i] {
                continue;
            }
            let g = grad[i];
            let m = beta1 * self.state.m[i] + (1.0 - beta1) * g;
            let v = beta2 * self.state.v[i] + (1.0 - beta2) * g * g;
            self.state.m[i] = m;
            self.state.v[i] = v;
            if lr != 0.0 {
                params[i] -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            }
        }
        lr
    }
}

/// One gradient step on `batch`; returns the loss before the update.
pub fn train_step(
    model: &mut ModelParameters,
    optimizer: &mut Optimizer,
    batch: &[Sample<'_>],
    objective: Objective,
) -> Result<LossValue> {
    let (loss, grad) = loss_and_grad(model, batch, objective)?;
    if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            step: optimizer.state.step,
            loss: loss.total,
        });
    }
    optimizer.apply(&mut model.values, &grad);
    Ok(loss)
}
