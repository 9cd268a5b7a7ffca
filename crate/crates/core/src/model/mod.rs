//! Encoder-decoder Transformer mapping a context window and a query input to a
//! Gaussian prediction of the query output.
//!
//! Row layouts used throughout: the context is `[b * m, n_u + n_y]` (sample
//! major, then time), encoder states are `[b * M, d]` with `M = m / L`, decoder
//! states are `[b * N, d]`, and predictions are `[b * (N - n_in), n_y]`.

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, Lineage, OptimSnapshot};
pub use config::ModelConfig;

use rand::Rng;

use crate::backend::nn::{feed_forward, multi_head_attention, AttentionVars, FeedForwardVars};
use crate::backend::{ParamId, ParamSet, Real, Tape, Tensor, Var};
use crate::datagen::{DatasetSample, Minibatch};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
struct NormIds {
    gain: ParamId,
    shift: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: NormIds,
    attn: AttnIds,
    ln2: NormIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln1: NormIds,
    self_attn: AttnIds,
    ln2: NormIds,
    cross_attn: AttnIds,
    ln3: NormIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
enum ContextEmbed {
    Linear(LinearIds),
    Patch {
        w_in: ParamId,
        w_rec: ParamId,
        bias: ParamId,
        proj: LinearIds,
    },
}

#[derive(Clone, Debug)]
struct Layout {
    ctx: ContextEmbed,
    enc: Vec<EncoderLayer>,
    enc_norm: NormIds,
    ic: LinearIds,
    qry: LinearIds,
    dec: Vec<DecoderLayer>,
    dec_norm: NormIds,
    head: LinearIds,
}

/// Creates parameters in a fixed order, either initialized or zero-filled.
struct Builder<'r, T, R> {
    params: ParamSet<T>,
    rng: Option<&'r mut R>,
}

impl<T: Real, R: Rng> Builder<'_, T, R> {
    /// Matrix `[fan_in, fan_out]` drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = match self.rng.as_deref_mut() {
            Some(rng) => (0..fan_in * fan_out)
                .map(|_| T::of(rng.random_range(-bound..bound)))
                .collect(),
            None => vec![T::zero(); fan_in * fan_out],
        };
        self.params.insert(name, Tensor::new(vec![fan_in, fan_out], data)?)
    }

    fn vector(&mut self, name: String, len: usize, value: f64) -> Result<ParamId> {
        self.params.insert(name, Tensor::full(vec![len], T::of(value)))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<LinearIds> {
        Ok(LinearIds {
            w: self.weight(format!("{name}.w"), fan_in, fan_out)?,
            b: self.vector(format!("{name}.b"), fan_out, 0.0)?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<NormIds> {
        Ok(NormIds {
            gain: self.vector(format!("{name}.gain"), d, 1.0)?,
            shift: self.vector(format!("{name}.shift"), d, 0.0)?,
        })
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<AttnIds> {
        Ok(AttnIds {
            wq: self.weight(format!("{name}.wq"), d, d)?,
            bq: self.vector(format!("{name}.bq"), d, 0.0)?,
            wk: self.weight(format!("{name}.wk"), d, d)?,
            wv: self.weight(format!("{name}.wv"), d, d)?,
            bv: self.vector(format!("{name}.bv"), d, 0.0)?,
            wo: self.weight(format!("{name}.wo"), d, d)?,
            bo: self.vector(format!("{name}.bo"), d, 0.0)?,
        })
    }

    fn ffn(&mut self, name: &str, d: usize, f: usize) -> Result<FfnIds> {
        Ok(FfnIds {
            w1: self.weight(format!("{name}.w1"), d, f)?,
            b1: self.vector(format!("{name}.b1"), f, 0.0)?,
            w2: self.weight(format!("{name}.w2"), f, d)?,
            b2: self.vector(format!("{name}.b2"), d, 0.0)?,
        })
    }
}

fn build<T: Real, R: Rng>(cfg: &ModelConfig, rng: Option<&mut R>) -> Result<(ParamSet<T>, Layout)> {
    cfg.validate()?;
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let nuy = cfg.n_u + cfg.n_y;
    let mut b = Builder {
        params: ParamSet::new(),
        rng,
    };
    let ctx = if cfg.patch_len > 1 {
        ContextEmbed::Patch {
            w_in: b.weight("patch.rnn.w_in".into(), nuy, d)?,
            w_rec: b.weight("patch.rnn.w_rec".into(), d, d)?,
            bias: b.vector("patch.rnn.bias".into(), d, 0.0)?,
            proj: b.linear("patch.proj", d, d)?,
        }
    } else {
        ContextEmbed::Linear(b.linear("ctx_embed", nuy, d)?)
    };
    let mut enc = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let p = format!("enc.{i}");
        enc.push(EncoderLayer {
            ln1: b.norm(&format!("{p}.ln1"), d)?,
            attn: b.attention(&format!("{p}.attn"), d)?,
            ln2: b.norm(&format!("{p}.ln2"), d)?,
            ffn: b.ffn(&format!("{p}.ffn"), d, f)?,
        });
    }
    let enc_norm = b.norm("enc.norm", d)?;
    let ic = b.linear("ic_embed", nuy, d)?;
    let qry = b.linear("qry_embed", cfg.n_u, d)?;
    let mut dec = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let p = format!("dec.{i}");
        dec.push(DecoderLayer {
            ln1: b.norm(&format!("{p}.ln1"), d)?,
            self_attn: b.attention(&format!("{p}.self_attn"), d)?,
            ln2: b.norm(&format!("{p}.ln2"), d)?,
            cross_attn: b.attention(&format!("{p}.cross_attn"), d)?,
            ln3: b.norm(&format!("{p}.ln3"), d)?,
            ffn: b.ffn(&format!("{p}.ffn"), d, f)?,
        });
    }
    let dec_norm = b.norm("dec.norm", d)?;
    let head = b.linear("head", d, 2 * cfg.n_y)?;
    let layout = Layout {
        ctx,
        enc,
        enc_norm,
        ic,
        qry,
        dec,
        dec_norm,
        head,
    };
    Ok((b.params, layout))
}

/// Sinusoidal encoding `[len, d]`: `sin(p / 10000^(2i/d))` in even columns and
/// the matching cosine in odd columns.
pub fn positional_encoding<T: Real>(len: usize, d: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); len * d];
    for p in 0..len {
        for i in (0..d).step_by(2) {
            let angle = p as f64 / 10_000f64.powf(i as f64 / d as f64);
            data[p * d + i] = T::of(angle.sin());
            if i + 1 < d {
                data[p * d + i + 1] = T::of(angle.cos());
            }
        }
    }
    Tensor::new(vec![len, d], data).expect("positional encoding shape")
}

/// `b` copies of the `[len, d]` encoding stacked sample by sample.
fn tiled_pe<T: Real>(b: usize, len: usize, d: usize) -> Tensor<T> {
    let pe = positional_encoding::<T>(len, d);
    let mut data = Vec::with_capacity(b * len * d);
    for _ in 0..b {
        data.extend_from_slice(pe.data());
    }
    Tensor::new(vec![b * len, d], data).expect("tiled encoding shape")
}

/// Model inputs for `b` stacked samples.
#[derive(Clone, Debug)]
pub struct BatchInputs<T> {
    pub b: usize,
    pub m: usize,
    pub n: usize,
    pub n_in: usize,
    /// `[b * m, n_u + n_y]`
    pub ctx: Tensor<T>,
    /// `[b * n_in, n_u + n_y]`
    pub ic: Tensor<T>,
    /// `[b * (N - n_in), n_u]`
    pub qry: Tensor<T>,
    /// `[b * (N - n_in), n_y]`
    pub target: Tensor<T>,
}

impl<T: Real> BatchInputs<T> {
    pub fn from_samples(samples: &[DatasetSample]) -> Result<Self> {
        let batch = Minibatch::new(samples.to_vec())?;
        Ok(Self::from_batch(&batch))
    }

    pub fn from_batch(batch: &Minibatch) -> Self {
        let (b, m, n, n_in) = (batch.len(), batch.m(), batch.n(), batch.n_in());
        let q = n - n_in;
        let c = |x: f32| T::of(x as f64);
        let mut ctx = Vec::with_capacity(b * m * 2);
        let mut ic = Vec::with_capacity(b * n_in * 2);
        let mut qry = Vec::with_capacity(b * q);
        let mut target = Vec::with_capacity(b * q);
        for s in batch.samples() {
            for (u, y) in s.ctx_u.iter().zip(&s.ctx_y) {
                ctx.extend([c(*u), c(*y)]);
            }
            for (u, y) in s.qry_u[..n_in].iter().zip(&s.qry_y[..n_in]) {
                ic.extend([c(*u), c(*y)]);
            }
            qry.extend(s.qry_u[n_in..].iter().map(|&u| c(u)));
            target.extend(s.qry_y[n_in..].iter().map(|&y| c(y)));
        }
        let t = |shape: Vec<usize>, data| Tensor::new(shape, data).expect("batch tensor shape");
        BatchInputs {
            b,
            m,
            n,
            n_in,
            ctx: t(vec![b * m, 2], ctx),
            ic: t(vec![b * n_in, 2], ic),
            qry: t(vec![b * q, 1], qry),
            target: t(vec![b * q, 1], target),
        }
    }
}

/// Predicted mean and standard deviation for positions `n_in+1..=N` of one
/// sample, row-major over (position, output channel).
#[derive(Clone, Debug, PartialEq)]
pub struct PredDist<T = f32> {
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
}

/// Tape handles of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub mu: Var,
    pub sigma: Var,
}

/// Meta-model parameters together with their configuration.
#[derive(Clone, Debug)]
pub struct MetaModel<T: Real = f32> {
    cfg: ModelConfig,
    params: ParamSet<T>,
    layout: Layout,
}

impl<T: Real> MetaModel<T> {
    /// Fresh model with uniform fan-in scaled weights, zero biases and unit
    /// normalization gains.
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (params, layout) = build(cfg, Some(rng))?;
        Ok(MetaModel {
            cfg: cfg.clone(),
            params,
            layout,
        })
    }

    /// Wraps existing parameters, checking names, order and shapes against
    /// the layout implied by `cfg`.
    pub fn from_params(cfg: &ModelConfig, params: ParamSet<T>) -> Result<Self> {
        let (expected, layout) = build::<T, rand_chacha::ChaCha8Rng>(cfg, None)?;
        let mut problems = Vec::new();
        for e in expected.iter() {
            match params.by_name(&e.name) {
                None => problems.push(format!("missing parameter `{}`", e.name)),
                Some(p) if p.value.shape() != e.value.shape() => problems.push(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    e.name,
                    p.value.shape(),
                    e.value.shape()
                )),
                Some(_) => {}
            }
        }
        for p in params.iter() {
            if expected.by_name(&p.name).is_none() {
                problems.push(format!("unexpected parameter `{}`", p.name));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems.join("; ")));
        }
        let mut ordered = expected;
        for p in ordered.iter_mut() {
            let src = params.by_name(&p.name).expect("checked above");
            p.value = src.value.clone();
            p.trainable = src.trainable;
        }
        Ok(MetaModel {
            cfg: cfg.clone(),
            params: ordered,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.num_trainable()
    }

    /// Trainable scalars grouped by top-level module name.
    pub fn module_counts(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for p in self.params.iter().filter(|p| p.trainable) {
            let mut parts = p.name.split('.');
            let first = parts.next().unwrap_or("");
            let key = match first {
                "enc" | "dec" => format!("{first}.{}", parts.next().unwrap_or("")),
                other => other.to_string(),
            };
            match out.last_mut() {
                Some((k, n)) if *k == key => *n += p.value.len(),
                _ => out.push((key, p.value.len())),
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> MetaModel<U> {
        MetaModel {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Binds the parameters to `tape`; gradients are tracked iff `track`.
    pub fn bind(&self, tape: &mut Tape<T>, track: bool) -> Vec<Var> {
        tape.bind(&self.params, track)
    }

    fn check_inputs(&self, x: &BatchInputs<T>) -> Result<()> {
        if self.cfg.n_u != 1 || self.cfg.n_y != 1 {
            return Err(Error::Config(format!(
                "datasets are single-input single-output, model has n_u={} n_y={}",
                self.cfg.n_u, self.cfg.n_y
            )));
        }
        if x.n_in != self.cfg.n_in {
            return Err(Error::Validation(format!(
                "batch n_in={} but model n_in={}",
                x.n_in, self.cfg.n_in
            )));
        }
        self.cfg.patches(x.m)?;
        Ok(())
    }

    fn norm(&self, tape: &mut Tape<T>, v: &[Var], x: Var, ids: NormIds) -> Result<Var> {
        tape.layer_norm(x, v[ids.gain.index()], v[ids.shift.index()], T::of(LN_EPS))
    }

    fn attn_vars(v: &[Var], a: AttnIds) -> AttentionVars {
        AttentionVars {
            wq: v[a.wq.index()],
            bq: v[a.bq.index()],
            wk: v[a.wk.index()],
            wv: v[a.wv.index()],
            bv: v[a.bv.index()],
            wo: v[a.wo.index()],
            bo: v[a.bo.index()],
        }
    }

    fn ffn_vars(v: &[Var], f: FfnIds) -> FeedForwardVars {
        FeedForwardVars {
            w1: v[f.w1.index()],
            b1: v[f.b1.index()],
            w2: v[f.w2.index()],
            b2: v[f.b2.index()],
        }
    }

    fn linear(tape: &mut Tape<T>, v: &[Var], x: Var, l: LinearIds) -> Result<Var> {
        tape.linear(x, v[l.w.index()], Some(v[l.b.index()]))
    }

    /// Residual update `x + drop(branch)`.
    fn residual<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        branch: Var,
        dropout: &mut Option<&mut R>,
    ) -> Result<Var> {
        let branch = match dropout.as_deref_mut() {
            Some(rng) if self.cfg.dropout > 0.0 => {
                let p = self.cfg.dropout;
                let keep = T::of(1.0 / (1.0 - p));
                let shape = tape.shape(branch).to_vec();
                let n = shape.iter().product();
                let mask: Vec<T> = (0..n)
                    .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
                    .collect();
                let mask = tape.constant(Tensor::new(shape, mask)?);
                tape.mul(branch, mask)?
            }
            _ => branch,
        };
        tape.add(x, branch)
    }

    /// Context embedding `[b * M, d]`: per-patch RNN final state followed by a
    /// square linear map, or a per-step linear map when `patch_len == 1`.
    pub fn patch_embed(&self, tape: &mut Tape<T>, v: &[Var], ctx: &Tensor<T>, b: usize) -> Result<Var> {
        let d = self.cfg.d_model;
        let width = self.cfg.n_u + self.cfg.n_y;
        if ctx.shape().len() != 2 || ctx.cols() != width || b == 0 || ctx.rows() % b != 0 {
            return Err(Error::dim(format!(
                "context of shape {:?} does not hold {b} samples of width {width}",
                ctx.shape()
            )));
        }
        let m = ctx.rows() / b;
        let n_patches = self.cfg.patches(m)?;
        let x = tape.constant(ctx.clone());
        match &self.layout.ctx {
            ContextEmbed::Linear(l) => Self::linear(tape, v, x, *l),
            ContextEmbed::Patch {
                w_in,
                w_rec,
                bias,
                proj,
            } => {
                let len = self.cfg.patch_len;
                let h0 = tape.constant(Tensor::zeros(vec![d]));
                let h = tape.rnn_scan(
                    x,
                    v[w_in.index()],
                    v[w_rec.index()],
                    v[bias.index()],
                    h0,
                    len,
                )?;
                let last: Vec<usize> = (0..b * n_patches).map(|p| p * len + len - 1).collect();
                let h = tape.gather_rows(h, last)?;
                Self::linear(tape, v, h, *proj)
            }
        }
    }

    /// Encoder stack over `b` sequences of patch embeddings.
    pub fn encode<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        v: &[Var],
        p: Var,
        b: usize,
        mut dropout: Option<&mut R>,
    ) -> Result<Var> {
        let d = self.cfg.d_model;
        let rows = tape.shape(p)[0];
        if b == 0 || rows % b != 0 || rows == 0 {
            return Err(Error::dim(format!("{rows} encoder rows do not split into {b} sequences")));
        }
        let pe = tape.constant(tiled_pe(b, rows / b, d));
        let mut x = tape.add(p, pe)?;
        for layer in &self.layout.enc {
            let h = self.norm(tape, v, x, layer.ln1)?;
            let a = multi_head_attention(
                tape,
                h,
                h,
                h,
                &Self::attn_vars(v, layer.attn),
                self.cfg.n_heads,
                b,
                false,
            )?;
            x = self.residual(tape, x, a, &mut dropout)?;
            let h = self.norm(tape, v, x, layer.ln2)?;
            let f = feed_forward(tape, h, &Self::ffn_vars(v, layer.ffn))?;
            x = self.residual(tape, x, f, &mut dropout)?;
        }
        self.norm(tape, v, x, self.layout.enc_norm)
    }

    /// Decoder stack and output head.
    #[allow(clippy::too_many_arguments)]
    pub fn decode<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        v: &[Var],
        zeta: Var,
        ic: &Tensor<T>,
        qry: &Tensor<T>,
        b: usize,
        mut dropout: Option<&mut R>,
    ) -> Result<ForwardVars> {
        let cfg = &self.cfg;
        let (d, n_in) = (cfg.d_model, cfg.n_in);
        if ic.rows() != b * n_in || ic.cols() != cfg.n_u + cfg.n_y {
            return Err(Error::dim(format!(
                "initial conditions of shape {:?}, expected [{}, {}]",
                ic.shape(),
                b * n_in,
                cfg.n_u + cfg.n_y
            )));
        }
        if qry.rows() % b != 0 || qry.rows() == 0 || qry.cols() != cfg.n_u {
            return Err(Error::dim(format!(
                "query inputs of shape {:?} do not hold {b} sequences of width {}",
                qry.shape(),
                cfg.n_u
            )));
        }
        let q = qry.rows() / b;
        let n = n_in + q;
        let icv = tape.constant(ic.clone());
        let qv = tape.constant(qry.clone());
        let ic_e = Self::linear(tape, v, icv, self.layout.ic)?;
        let q_e = Self::linear(tape, v, qv, self.layout.qry)?;
        let both = tape.concat_rows(&[ic_e, q_e])?;
        let mut order = Vec::with_capacity(b * n);
        for s in 0..b {
            order.extend((0..n_in).map(|t| s * n_in + t));
            order.extend((0..q).map(|t| b * n_in + s * q + t));
        }
        let x = tape.gather_rows(both, order)?;
        let pe = tape.constant(tiled_pe(b, n, d));
        let mut x = tape.add(x, pe)?;
        for layer in &self.layout.dec {
            let h = self.norm(tape, v, x, layer.ln1)?;
            let a = multi_head_attention(
                tape,
                h,
                h,
                h,
                &Self::attn_vars(v, layer.self_attn),
                cfg.n_heads,
                b,
                true,
            )?;
            x = self.residual(tape, x, a, &mut dropout)?;
            let h = self.norm(tape, v, x, layer.ln2)?;
            let c = multi_head_attention(
                tape,
                h,
                zeta,
                zeta,
                &Self::attn_vars(v, layer.cross_attn),
                cfg.n_heads,
                b,
                false,
            )?;
            x = self.residual(tape, x, c, &mut dropout)?;
            let h = self.norm(tape, v, x, layer.ln3)?;
            let f = feed_forward(tape, h, &Self::ffn_vars(v, layer.ffn))?;
            x = self.residual(tape, x, f, &mut dropout)?;
        }
        let x = self.norm(tape, v, x, self.layout.dec_norm)?;
        let rows: Vec<usize> = (0..b).flat_map(|s| (n_in..n).map(move |t| s * n + t)).collect();
        let x = tape.gather_rows(x, rows)?;
        let out = Self::linear(tape, v, x, self.layout.head)?;
        let mu = tape.slice_cols(out, 0, cfg.n_y)?;
        let raw = tape.slice_cols(out, cfg.n_y, cfg.n_y)?;
        let sigma = tape.softplus(raw);
        let sigma = tape.add_scalar(sigma, T::of(cfg.sigma_min));
        Ok(ForwardVars { mu, sigma })
    }

    /// Full forward pass on the tape.
    pub fn forward_tape<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        v: &[Var],
        x: &BatchInputs<T>,
        mut dropout: Option<&mut R>,
    ) -> Result<ForwardVars> {
        self.check_inputs(x)?;
        let p = self.patch_embed(tape, v, &x.ctx, x.b)?;
        let zeta = self.encode(tape, v, p, x.b, dropout.as_deref_mut())?;
        self.decode(tape, v, zeta, &x.ic, &x.qry, x.b, dropout)
    }

    /// Mean Gaussian NLL of a batch, recorded on `tape`.
    pub fn loss_tape<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        v: &[Var],
        x: &BatchInputs<T>,
        dropout: Option<&mut R>,
    ) -> Result<Var> {
        let out = self.forward_tape(tape, v, x, dropout)?;
        tape.gaussian_nll(out.mu, out.sigma, &x.target)
    }

    /// Predictions for a batch without gradient tracking.
    pub fn predict_inputs(&self, x: &BatchInputs<T>) -> Result<Vec<PredDist<T>>> {
        let mut tape = Tape::new();
        let v = self.bind(&mut tape, false);
        let out = self.forward_tape::<rand_chacha::ChaCha8Rng>(&mut tape, &v, x, None)?;
        let per = (x.n - x.n_in) * self.cfg.n_y;
        let mu = tape.value(out.mu).data();
        let sigma = tape.value(out.sigma).data();
        Ok((0..x.b)
            .map(|s| PredDist {
                mu: mu[s * per..(s + 1) * per].to_vec(),
                sigma: sigma[s * per..(s + 1) * per].to_vec(),
            })
            .collect())
    }

    pub fn predict(&self, batch: &Minibatch) -> Result<Vec<PredDist<T>>> {
        self.predict_inputs(&BatchInputs::from_batch(batch))
    }

    /// Patch embeddings `[M, d]` of a single context.
    pub fn embed_context(&self, ctx_u: &[T], ctx_y: &[T]) -> Result<Tensor<T>> {
        if ctx_u.len() != ctx_y.len() {
            return Err(Error::dim("context input and output lengths differ"));
        }
        let data = ctx_u.iter().zip(ctx_y).flat_map(|(u, y)| [*u, *y]).collect();
        let ctx = Tensor::new(vec![ctx_u.len(), 2], data)?;
        let mut tape = Tape::new();
        let v = self.bind(&mut tape, false);
        let p = self.patch_embed(&mut tape, &v, &ctx, 1)?;
        Ok(tape.value(p).clone())
    }
}

pub fn param_count(cfg: &ModelConfig) -> usize {
    cfg.param_count()
}
