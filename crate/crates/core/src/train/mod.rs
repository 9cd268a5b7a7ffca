//! Minibatch training of the meta-model on the synthetic stream.

mod optim;
mod trainer;

pub use optim::{
    adamw_step, global_norm, scheduled_lr, AdamW, LrSchedule, OptimState, StepOutcome,
};
pub use trainer::{
    fine_tune, read_metrics, resume, train, MetricRecord, Progress, TrainRun, TrainSummary,
    BEST_CHECKPOINT, LATEST_CHECKPOINT, METRICS_FILE,
};

use serde::{Deserialize, Serialize};

use crate::backend::{nll_value, Real};
use crate::error::{Error, Result};
use crate::model::PredDist;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_iters: u64,
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps_opt: f64,
    pub weight_decay: f64,
    /// Defaults to 1% of `total_iters`.
    pub warmup_iters: Option<u64>,
    pub lr_schedule: LrSchedule,
    /// Cosine floor as a fraction of `lr`.
    pub min_lr_ratio: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub val_every: u64,
    /// Defaults to `val_every`.
    pub checkpoint_every: Option<u64>,
    /// Seeds parameter initialization and dropout masks.
    pub seed: u64,
    pub max_consecutive_skips: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: 1_000_000,
            lr: 1e-4,
            betas: [0.9, 0.95],
            eps_opt: 1e-8,
            weight_decay: 0.01,
            warmup_iters: None,
            lr_schedule: LrSchedule::Cosine,
            min_lr_ratio: 0.1,
            grad_clip: 1.0,
            val_every: 1000,
            checkpoint_every: None,
            seed: 0,
            max_consecutive_skips: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", self.lr));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b) || *b == 0.0) {
            return bad(format!("train.betas must lie in (0, 1), got {:?}", self.betas));
        }
        if !(self.eps_opt > 0.0) {
            return bad("train.eps_opt must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("train.weight_decay must be non-negative".into());
        }
        if self.warmup() > self.total_iters {
            return bad(format!(
                "train.warmup_iters ({}) exceeds train.total_iters ({})",
                self.warmup(),
                self.total_iters
            ));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad("train.min_lr_ratio must lie in [0, 1]".into());
        }
        if !(self.grad_clip >= 0.0) {
            return bad("train.grad_clip must be non-negative".into());
        }
        if self.val_every == 0 || self.checkpoint_every == Some(0) {
            return bad("train.val_every and train.checkpoint_every must be positive".into());
        }
        Ok(())
    }

    pub fn warmup(&self) -> u64 {
        self.warmup_iters.unwrap_or(self.total_iters / 100)
    }

    pub fn checkpoint_every(&self) -> u64 {
        self.checkpoint_every.unwrap_or(self.val_every)
    }

    pub fn lr_at(&self, iter: u64) -> f64 {
        scheduled_lr(
            self.lr_schedule,
            self.lr,
            iter,
            self.total_iters,
            self.warmup(),
            self.min_lr_ratio,
        )
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.eps_opt,
            weight_decay: self.weight_decay,
        }
    }

    pub fn clip(&self) -> Option<f64> {
        (self.grad_clip > 0.0).then_some(self.grad_clip)
    }
}

/// Mean Gaussian negative log-likelihood of `target` under `pred`.
pub fn gaussian_nll<T: Real>(pred: &PredDist<T>, target: &[T]) -> Result<f64> {
    if pred.mu.len() != target.len() || pred.sigma.len() != target.len() {
        return Err(Error::Dimension(format!(
            "gaussian_nll: mu {}, sigma {}, target {}",
            pred.mu.len(),
            pred.sigma.len(),
            target.len()
        )));
    }
    let all = pred.mu.iter().chain(&pred.sigma).chain(target);
    if let Some(x) = all.clone().find(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("gaussian_nll: non-finite input {x}")));
    }
    if let Some(s) = pred.sigma.iter().find(|s| **s <= T::zero()) {
        return Err(Error::Numeric(format!("gaussian_nll: non-positive sigma {s}")));
    }
    let v = nll_value(&pred.mu, &pred.sigma, target).as_f64();
    if !v.is_finite() {
        return Err(Error::Numeric("gaussian_nll: non-finite result".into()));
    }
    Ok(v)
}
