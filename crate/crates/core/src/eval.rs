//! Prediction quality on fixed test sets: RMSE, NLL, interval coverage, and
//! per-position trace export.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::nll_value;
use crate::datagen::{write_atomic, DatasetSample, TestSet};
use crate::error::{Error, Result};
use crate::model::{BatchInputs, Checkpoint, MetaModel, PredDist};

/// Root mean squared difference.
pub fn rmse(mu: &[f64], y: &[f64]) -> Result<f64> {
    if mu.is_empty() || mu.len() != y.len() {
        return Err(Error::Validation(format!(
            "rmse needs equal non-empty lengths, got {} and {}",
            mu.len(),
            y.len()
        )));
    }
    let ss: f64 = mu.iter().zip(y).map(|(m, t)| (t - m) * (t - m)).sum();
    Ok((ss / mu.len() as f64).sqrt())
}

/// Fraction of positions with `|y - mu| <= k sigma`.
pub fn coverage(mu: &[f64], sigma: &[f64], y: &[f64], k: f64) -> Result<f64> {
    if mu.len() != sigma.len() || mu.len() != y.len() {
        return Err(Error::Validation(format!(
            "coverage shapes differ: mu {}, sigma {}, y {}",
            mu.len(),
            sigma.len(),
            y.len()
        )));
    }
    if mu.is_empty() {
        return Ok(1.0);
    }
    let hits = mu
        .iter()
        .zip(sigma)
        .zip(y)
        .filter(|((m, s), t)| (*t - *m).abs() <= k * *s)
        .count();
    Ok(hits as f64 / mu.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Free-form tag for the input family, e.g. `white` or `prbs`.
    pub label: String,
    pub batch_size: usize,
    pub coverage_k: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            label: "white".into(),
            batch_size: 32,
            coverage_k: vec![1.0, 1.96, 2.0, 3.0],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be positive".into()));
        }
        if self.coverage_k.iter().any(|k| !(*k > 0.0 && k.is_finite())) {
            return Err(Error::Config("eval.coverage_k entries must be positive".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub k: f64,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub samples: usize,
    /// Mean of the per-sample RMSEs.
    pub rmse: f64,
    pub nll: f64,
    pub coverage: Vec<Coverage>,
    pub per_sample_rmse: Vec<f64>,
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub testset_hash: String,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn coverage_at(&self, k: f64) -> Option<f64> {
        self.coverage.iter().find(|c| c.k == k).map(|c| c.fraction)
    }
}

/// Fields on which a model and a test set must agree.
pub fn compatibility(model: &MetaModel<f32>, set: &TestSet) -> Result<()> {
    let cfg = model.config();
    let mut conflicts = Vec::new();
    if cfg.n_in != set.cfg.n_in {
        conflicts.push(format!(
            "n_in: checkpoint {} vs test set {}",
            cfg.n_in, set.cfg.n_in
        ));
    }
    if set.cfg.m % cfg.patch_len != 0 {
        conflicts.push(format!(
            "m: test set context length {} is not a multiple of checkpoint patch_len {}",
            set.cfg.m, cfg.patch_len
        ));
    }
    if cfg.n_u != 1 || cfg.n_y != 1 {
        conflicts.push(format!(
            "channels: checkpoint has n_u={} n_y={}, test sets are single-channel",
            cfg.n_u, cfg.n_y
        ));
    }
    if conflicts.is_empty() {
        Ok(())
    } else {
        Err(Error::Incompatible { conflicts })
    }
}

/// Predictions for every sample, in order, computed in chunks of `batch_size`.
pub fn predict_samples(
    model: &MetaModel<f32>,
    samples: &[DatasetSample],
    batch_size: usize,
) -> Result<Vec<PredDist>> {
    let chunks = samples
        .par_chunks(batch_size.max(1))
        .map(|chunk| model.predict_inputs(&BatchInputs::from_samples(chunk)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Per-sample RMSE and NLL plus pooled coverage of `preds` against `targets`.
pub struct Scores {
    pub per_sample_rmse: Vec<f64>,
    pub rmse: f64,
    pub nll: f64,
    pub coverage: Vec<Coverage>,
}

pub fn score(preds: &[PredDist], targets: &[&[f32]], ks: &[f64]) -> Result<Scores> {
    if preds.len() != targets.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let widen = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    let mut per = Vec::with_capacity(preds.len());
    let mut nll_sum = 0.0;
    let (mut all_mu, mut all_s, mut all_y) = (Vec::new(), Vec::new(), Vec::new());
    for (p, t) in preds.iter().zip(targets) {
        let (mu, s, y) = (widen(&p.mu), widen(&p.sigma), widen(t));
        per.push(rmse(&mu, &y)?);
        nll_sum += nll_value(&mu, &s, &y);
        all_mu.extend(mu);
        all_s.extend(s);
        all_y.extend(y);
    }
    let n = preds.len().max(1) as f64;
    let coverage = ks
        .iter()
        .map(|&k| {
            Ok(Coverage {
                k,
                fraction: coverage(&all_mu, &all_s, &all_y, k)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scores {
        rmse: per.iter().sum::<f64>() / n,
        nll: nll_sum / n,
        per_sample_rmse: per,
        coverage,
    })
}

fn predictions_for(ckpt: &Checkpoint, set: &TestSet, cfg: &EvalConfig) -> Result<Vec<PredDist>> {
    cfg.validate()?;
    compatibility(&ckpt.model, set)?;
    predict_samples(&ckpt.model, &set.samples, cfg.batch_size)
}

fn build_report(
    ckpt: &Checkpoint,
    set: &TestSet,
    cfg: &EvalConfig,
    preds: &[PredDist],
) -> Result<EvalReport> {
    let targets: Vec<&[f32]> = set.samples.iter().map(|s| s.targets()).collect();
    let s = score(preds, &targets, &cfg.coverage_k)?;
    Ok(EvalReport {
        label: cfg.label.clone(),
        samples: set.len(),
        rmse: s.rmse,
        nll: s.nll,
        coverage: s.coverage,
        per_sample_rmse: s.per_sample_rmse,
        config_hash: cfg.hash(),
        checkpoint_hash: ckpt.weights_hash(),
        testset_hash: set.content_hash(),
    })
}

/// Evaluates a checkpoint on a test set.
pub fn evaluate(ckpt: &Checkpoint, set: &TestSet, cfg: &EvalConfig) -> Result<EvalReport> {
    let preds = predictions_for(ckpt, set, cfg)?;
    build_report(ckpt, set, cfg, &preds)
}

/// Header of the trace CSV.
pub const TRACE_HEADER: &str = "sample_id,t,y,mu,sigma,error,lower,upper";

fn trace_csv(set: &TestSet, preds: &[PredDist]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    let n_in = set.cfg.n_in;
    for (i, (s, p)) in set.samples.iter().zip(preds).enumerate() {
        for (j, ((&y, &mu), &sigma)) in s.targets().iter().zip(&p.mu).zip(&p.sigma).enumerate() {
            let (y, mu, sigma) = (y as f64, mu as f64, sigma as f64);
            out.push_str(&format!(
                "{i},{},{y},{mu},{sigma},{},{},{}\n",
                n_in + j + 1,
                y - mu,
                mu - 3.0 * sigma,
                mu + 3.0 * sigma
            ));
        }
    }
    out
}

/// Writes one CSV row per sample and predicted position (`t` is 1-based
/// within the query window) and returns the matching report.
pub fn export_traces(
    ckpt: &Checkpoint,
    set: &TestSet,
    cfg: &EvalConfig,
    path: &Path,
) -> Result<EvalReport> {
    let preds = predictions_for(ckpt, set, cfg)?;
    write_atomic(path, trace_csv(set, &preds).as_bytes())?;
    build_report(ckpt, set, cfg, &preds)
}
