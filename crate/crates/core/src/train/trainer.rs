use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{OptimState, StepOutcome, TrainConfig};
use crate::backend::Tape;
use crate::datagen::{batch_at, sample_rng, Domain, StreamConfig, TestSet};
use crate::error::{Error, Result};
use crate::eval::{predict_samples, score};
use crate::model::{BatchInputs, Checkpoint, Lineage, MetaModel};

pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

const VAL_BATCH: usize = 32;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Lineage {
        parent_hash: String,
        change: String,
    },
    Step {
        /// Iterations completed, this one included.
        iter: u64,
        /// Absent when the loss was non-finite.
        train_nll: Option<f64>,
        lr: f64,
        skipped: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        val_rmse: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        val_nll: Option<f64>,
        /// Seconds since the run started, summed across resumes.
        wallclock: f64,
    },
}

impl MetricRecord {
    /// The record with its wall-clock field zeroed, for run comparisons.
    pub fn without_time(&self) -> MetricRecord {
        let mut r = self.clone();
        if let MetricRecord::Step { wallclock, .. } = &mut r {
            *wallclock = 0.0;
        }
        r
    }
}

/// Training state stored in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub iteration: u64,
    pub best_val_rmse: Option<f64>,
    pub consecutive_skips: u64,
    pub total_skips: u64,
    pub elapsed: f64,
    pub val_hash: String,
    pub train: TrainConfig,
    pub stream: StreamConfig,
}

/// Everything a training loop needs besides the model.
pub struct TrainRun<'a> {
    pub stream: StreamConfig,
    pub train: TrainConfig,
    pub val: &'a TestSet,
    pub out_dir: PathBuf,
    /// Checked between iterations; when raised the loop checkpoints and returns.
    pub stop: Option<Arc<AtomicBool>>,
    /// Stop after this many iterations of the current invocation.
    pub stop_after: Option<u64>,
    pub verbose: bool,
}

impl<'a> TrainRun<'a> {
    pub fn new(
        stream: StreamConfig,
        train: TrainConfig,
        val: &'a TestSet,
        out_dir: impl Into<PathBuf>,
    ) -> Self {
        TrainRun {
            stream,
            train,
            val,
            out_dir: out_dir.into(),
            stop: None,
            stop_after: None,
            verbose: false,
        }
    }

    fn validate(&self, model: &MetaModel<f32>) -> Result<()> {
        self.stream.validate()?;
        self.train.validate()?;
        let mut conflicts = model_conflicts(model, &self.stream, "stream");
        if !self.val.is_empty() {
            conflicts.extend(model_conflicts(model, &self.val.cfg, "validation set"));
        }
        if conflicts.is_empty() {
            Ok(())
        } else {
            Err(Error::Incompatible { conflicts })
        }
    }

    fn metrics_path(&self) -> PathBuf {
        self.out_dir.join(METRICS_FILE)
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub model: MetaModel<f32>,
    pub iterations: u64,
    pub best_val_rmse: Option<f64>,
    pub last_val_rmse: Option<f64>,
    pub total_skips: u64,
    /// True when the loop returned before `total_iters`.
    pub interrupted: bool,
    pub latest: PathBuf,
    pub best: Option<PathBuf>,
}

fn model_conflicts(model: &MetaModel<f32>, s: &StreamConfig, what: &str) -> Vec<String> {
    let cfg = model.config();
    let mut out = Vec::new();
    if cfg.n_in != s.n_in {
        out.push(format!("n_in: model {} vs {what} {}", cfg.n_in, s.n_in));
    }
    if s.m % cfg.patch_len != 0 {
        out.push(format!(
            "m: {what} context length {} is not a multiple of model patch_len {}",
            s.m, cfg.patch_len
        ));
    }
    out
}

/// Leaf-level differences between two JSON documents as `path: a -> b`.
fn json_diff(prefix: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let p = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                json_diff(&p, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), out);
            }
        }
        _ if a != b => out.push(format!("{prefix}: {a} -> {b}")),
        _ => {}
    }
}

fn diff<T: Serialize>(prefix: &str, a: &T, b: &T) -> Vec<String> {
    let mut out = Vec::new();
    json_diff(
        prefix,
        &serde_json::to_value(a).expect("config serializes"),
        &serde_json::to_value(b).expect("config serializes"),
        &mut out,
    );
    out
}

struct Session {
    model: MetaModel<f32>,
    optim: OptimState<f32>,
    progress: Progress,
    lineage: Lineage,
}

impl Session {
    fn checkpoint(&self, with_optim: bool) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optim: with_optim.then(|| self.optim.snapshot()),
            lineage: self.lineage.clone(),
            progress: serde_json::to_value(&self.progress).expect("progress serializes"),
        }
    }
}

fn append(file: &mut File, path: &Path, rec: &MetricRecord) -> Result<()> {
    let mut line = serde_json::to_string(rec).expect("record serializes");
    line.push('\n');
    file.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    file.flush().map_err(|e| Error::io(path, e))
}

/// Parses a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
                offset,
                msg: format!("{}: bad metrics line: {e}", path.display()),
            })?);
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

fn create_metrics(run: &TrainRun) -> Result<File> {
    fs::create_dir_all(&run.out_dir).map_err(|e| Error::io(&run.out_dir, e))?;
    let path = run.metrics_path();
    File::create(&path).map_err(|e| Error::io(&path, e))
}

fn fresh_progress(run: &TrainRun) -> Progress {
    Progress {
        iteration: 0,
        best_val_rmse: None,
        consecutive_skips: 0,
        total_skips: 0,
        elapsed: 0.0,
        val_hash: run.val.content_hash(),
        train: run.train.clone(),
        stream: run.stream.clone(),
    }
}

/// Trains `model` from scratch, writing checkpoints and the metrics log to
/// `run.out_dir`.
pub fn train(model: MetaModel<f32>, run: &TrainRun) -> Result<TrainSummary> {
    run.validate(&model)?;
    let mut metrics = create_metrics(run)?;
    let session = Session {
        optim: OptimState::new(model.params()),
        model,
        progress: fresh_progress(run),
        lineage: Lineage::default(),
    };
    run_loop(session, run, &mut metrics)
}

/// Continues training of `parent` on `run.stream` with a fresh optimizer and
/// records the parent's weights hash.
pub fn fine_tune(parent: &Checkpoint, run: &TrainRun) -> Result<TrainSummary> {
    run.validate(&parent.model)?;
    let parent_hash = parent.weights_hash();
    let change = match serde_json::from_value::<Progress>(parent.progress.clone()) {
        Ok(p) => {
            let d = diff("stream", &p.stream, &run.stream);
            if d.is_empty() {
                "stream unchanged".to_string()
            } else {
                d.join("; ")
            }
        }
        Err(_) => "parent stream configuration unknown".to_string(),
    };
    let mut metrics = create_metrics(run)?;
    append(
        &mut metrics,
        &run.metrics_path(),
        &MetricRecord::Lineage {
            parent_hash: parent_hash.clone(),
            change: change.clone(),
        },
    )?;
    let model = parent.model.clone();
    let session = Session {
        optim: OptimState::new(model.params()),
        model,
        progress: fresh_progress(run),
        lineage: Lineage {
            parent_hash: Some(parent_hash),
            change: Some(change),
        },
    };
    run_loop(session, run, &mut metrics)
}

/// Resumes from `run.out_dir/latest.ckpt`. The stored configuration and
/// validation set must match `run`; log lines past the checkpoint are dropped.
pub fn resume(run: &TrainRun) -> Result<TrainSummary> {
    let path = run.out_dir.join(LATEST_CHECKPOINT);
    let ckpt = Checkpoint::load(&path)?;
    let progress: Progress =
        serde_json::from_value(ckpt.progress.clone()).map_err(|e| Error::Format {
            offset: 0,
            msg: format!("{}: no training progress record: {e}", path.display()),
        })?;
    let mut conflicts = diff("train", &progress.train, &run.train);
    conflicts.extend(diff("stream", &progress.stream, &run.stream));
    if progress.val_hash != run.val.content_hash() {
        conflicts.push("validation set: content hash differs".into());
    }
    if !conflicts.is_empty() {
        return Err(Error::Incompatible { conflicts });
    }
    run.validate(&ckpt.model)?;
    let snapshot = ckpt.optim.ok_or_else(|| {
        Error::Validation(format!("{} holds no optimizer state", path.display()))
    })?;
    let optim = OptimState::from_snapshot(snapshot);
    optim.check(ckpt.model.params())?;

    let mpath = run.metrics_path();
    let kept: Vec<MetricRecord> = if mpath.exists() {
        read_metrics(&mpath)?
            .into_iter()
            .filter(|r| match r {
                MetricRecord::Step { iter, .. } => *iter <= progress.iteration,
                MetricRecord::Lineage { .. } => true,
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut metrics = create_metrics(run)?;
    for r in &kept {
        append(&mut metrics, &mpath, r)?;
    }
    let session = Session {
        model: ckpt.model,
        optim,
        progress,
        lineage: ckpt.lineage,
    };
    run_loop(session, run, &mut metrics)
}

fn step(s: &mut Session, run: &TrainRun, iter: u64, lr: f64) -> Result<(Option<f64>, StepOutcome)> {
    let batch = batch_at(&run.stream, iter)?;
    let x = BatchInputs::<f32>::from_batch(&batch);
    let mut tape = Tape::new();
    let v = s.model.bind(&mut tape, true);
    let mut rng = sample_rng(run.train.seed, Domain::Dropout, iter, 0);
    let skip = |s: &mut Session| {
        s.optim.step += 1;
        Ok((None, StepOutcome::Skipped))
    };
    let loss = match s.model.loss_tape(&mut tape, &v, &x, Some(&mut rng)) {
        Ok(l) => l,
        Err(Error::Numeric(_)) => return skip(s),
        Err(e) => return Err(e),
    };
    let value = tape.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return skip(s);
    }
    let g = match tape.backward(loss) {
        Ok(g) => g,
        Err(Error::Numeric(_)) => return skip(s),
        Err(e) => return Err(e),
    };
    let grads: Vec<_> = v.iter().map(|&var| g.get_or_zeros(var)).collect();
    let out = super::adamw_step(
        s.model.params_mut(),
        &grads,
        &mut s.optim,
        &run.train.adamw(),
        lr,
        run.train.clip(),
    )?;
    Ok((Some(value), out))
}

fn validate_model(model: &MetaModel<f32>, val: &TestSet) -> Result<Option<(f64, f64)>> {
    if val.is_empty() {
        return Ok(None);
    }
    let preds = predict_samples(model, &val.samples, VAL_BATCH)?;
    let targets: Vec<&[f32]> = val.samples.iter().map(|s| s.targets()).collect();
    let s = score(&preds, &targets, &[])?;
    Ok(Some((s.rmse, s.nll)))
}

fn run_loop(mut s: Session, run: &TrainRun, metrics: &mut File) -> Result<TrainSummary> {
    let cfg = &run.train;
    let mpath = run.metrics_path();
    let latest = run.out_dir.join(LATEST_CHECKPOINT);
    let best = run.out_dir.join(BEST_CHECKPOINT);
    let clock = Instant::now();
    let elapsed0 = s.progress.elapsed;
    let mut done_here = 0u64;
    let mut interrupted = false;
    let mut last_val = None;

    while s.progress.iteration < cfg.total_iters {
        let stop = run.stop.as_ref().is_some_and(|f| f.load(Ordering::SeqCst));
        if stop || run.stop_after == Some(done_here) {
            interrupted = true;
            break;
        }
        let iter = s.progress.iteration;
        let lr = cfg.lr_at(iter);
        let (train_nll, outcome) = step(&mut s, run, iter, lr)?;
        s.progress.iteration += 1;
        done_here += 1;
        let k = s.progress.iteration;
        s.progress.elapsed = elapsed0 + clock.elapsed().as_secs_f64();

        let skipped = outcome == StepOutcome::Skipped;
        if skipped {
            s.progress.consecutive_skips += 1;
            s.progress.total_skips += 1;
            if run.verbose {
                eprintln!("warning: iteration {k}: non-finite loss or gradient, step skipped");
            }
        } else {
            s.progress.consecutive_skips = 0;
        }

        let mut val = None;
        if k % cfg.val_every == 0 || k == cfg.total_iters {
            val = validate_model(&s.model, run.val)?;
            if let Some((rmse, _)) = val {
                last_val = Some(rmse);
                if s.progress.best_val_rmse.is_none_or(|b| rmse < b) {
                    s.progress.best_val_rmse = Some(rmse);
                    s.checkpoint(false).save(&best)?;
                }
            }
        }
        append(
            metrics,
            &mpath,
            &MetricRecord::Step {
                iter: k,
                train_nll,
                lr,
                skipped,
                val_rmse: val.map(|v| v.0),
                val_nll: val.map(|v| v.1),
                wallclock: s.progress.elapsed,
            },
        )?;
        if run.verbose && val.is_some() {
            eprintln!(
                "iter {k}: train_nll {:.4} val_rmse {:.4}",
                train_nll.unwrap_or(f64::NAN),
                last_val.unwrap_or(f64::NAN)
            );
        }
        if s.progress.consecutive_skips > cfg.max_consecutive_skips {
            s.checkpoint(true).save(&latest)?;
            return Err(Error::Numeric(format!(
                "training aborted at iteration {k}: {} consecutive non-finite steps",
                s.progress.consecutive_skips
            )));
        }
        if k % cfg.checkpoint_every() == 0 && k < cfg.total_iters {
            s.checkpoint(true).save(&latest)?;
        }
    }
    s.checkpoint(true).save(&latest)?;
    Ok(TrainSummary {
        iterations: s.progress.iteration,
        best_val_rmse: s.progress.best_val_rmse,
        last_val_rmse: last_val,
        total_skips: s.progress.total_skips,
        interrupted,
        latest,
        best: best.exists().then_some(best),
        model: s.model,
    })
}
