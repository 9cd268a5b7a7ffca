use serde::{Deserialize, Serialize};

use crate::backend::{ParamSet, Real, Tensor};
use crate::error::{Error, Result};
use crate::model::OptimSnapshot;

/// AdamW moment estimates, one pair per parameter in set order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    /// Number of optimizer calls so far, skipped steps included.
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect()
        };
        OptimState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn check(&self, params: &ParamSet<T>) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::Validation(format!(
                "optimizer state holds {} tensors for {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        for ((p, m), v) in params.iter().zip(&self.m).zip(&self.v) {
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::Validation(format!(
                    "optimizer state for `{}` has shape {:?}, expected {:?}",
                    p.name,
                    m.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }
}

impl OptimState<f32> {
    pub fn snapshot(&self) -> OptimSnapshot {
        OptimSnapshot {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn from_snapshot(s: OptimSnapshot) -> Self {
        OptimState {
            step: s.step,
            m: s.m,
            v: s.v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup, then cosine decay to `min_lr_ratio * lr`.
    Cosine,
}

/// Learning rate for 0-based iteration `iter`.
pub fn scheduled_lr(
    schedule: LrSchedule,
    peak: f64,
    iter: u64,
    total: u64,
    warmup: u64,
    min_ratio: f64,
) -> f64 {
    if iter < warmup {
        return peak * (iter + 1) as f64 / warmup as f64;
    }
    match schedule {
        LrSchedule::Constant => peak,
        LrSchedule::Cosine => {
            let span = total.saturating_sub(warmup).max(1) as f64;
            let progress = ((iter - warmup) as f64 / span).min(1.0);
            let floor = min_ratio * peak;
            floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Decoupled-weight-decay Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient was non-finite; parameters and moments are unchanged.
    Skipped,
}

/// Euclidean norm of all gradients, summed per parameter in name order so the
/// result does not depend on how the set is ordered.
pub fn global_norm<T: Real>(params: &ParamSet<T>, grads: &[Tensor<T>]) -> f64 {
    let mut per: Vec<(&str, f64)> = params
        .iter()
        .zip(grads)
        .filter(|(p, _)| p.trainable)
        .map(|(p, g)| {
            let s: f64 = g.data().iter().map(|x| x.as_f64() * x.as_f64()).sum();
            (p.name.as_str(), s)
        })
        .collect();
    per.sort_by(|a, b| a.0.cmp(b.0));
    per.iter().map(|(_, s)| s).sum::<f64>().sqrt()
}

/// One AdamW update with bias correction. Gradients are in parameter order;
/// when `clip` is set they are rescaled to a global norm of at most `clip`.
pub fn adamw_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    state: &mut OptimState<T>,
    hp: &AdamW,
    lr: f64,
    clip: Option<f64>,
) -> Result<StepOutcome> {
    state.check(params)?;
    if grads.len() != params.len() {
        return Err(Error::Validation(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    state.step += 1;
    let finite = params
        .iter()
        .zip(grads)
        .all(|(p, g)| !p.trainable || g.all_finite());
    if !finite {
        return Ok(StepOutcome::Skipped);
    }
    let scale = match clip {
        Some(c) => {
            let n = global_norm(params, grads);
            if n > c {
                c / n
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let decay = 1.0 - lr * hp.weight_decay;
    for (i, p) in params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let gj = g[j].as_f64() * scale;
            let mj = hp.beta1 * m[j].as_f64() + (1.0 - hp.beta1) * gj;
            let vj = hp.beta2 * v[j].as_f64() + (1.0 - hp.beta2) * gj * gj;
            m[j] = T::of(mj);
            v[j] = T::of(vj);
            let update = (mj / bc1) / ((vj / bc2).sqrt() + hp.eps);
            *w = T::of(w.as_f64() * decay - lr * update);
        }
    }
    Ok(StepOutcome::Applied)
}
