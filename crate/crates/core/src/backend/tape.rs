//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Tape`] records every operation in evaluation order. `backward` walks the
//! records in reverse and accumulates adjoints. Operations are coarse: attention,
//! the recurrent scan, layer normalization and the Gaussian NLL are single
//! records with hand-derived adjoints, so one minibatch is a few hundred records.
//!
//! Matrix-valued operations treat a tensor as `[rows, cols]` where `cols` is the
//! trailing extent. Vectors (`[d]`) are used for biases, gains and shifts.

use super::params::ParamSet;
use super::tensor::{gemm, Real, Tensor, View, ViewMut};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Tanh(Var),
    Gelu(Var),
    Softplus(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<T>,
    },
    RnnScan {
        x: Var,
        w_in: Var,
        w_rec: Var,
        bias: Var,
        h0: Var,
        steps: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    GaussianNll {
        mu: Var,
        sigma: Var,
        target: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation record for one forward evaluation.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// influence the loss or was recorded without gradient tracking.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, zeros when it received none.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let inner = c * (x + a * x * x * x);
    let th = inner.fast_tanh();
    let y = half * x * (T::one() + th);
    let dinner = c * (T::one() + T::of(3.0) * a * x * x);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * dinner;
    (y, dy)
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; gradients flow into it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records every parameter of `params` as a leaf, in set order. Trainable
    /// parameters track gradients only when `track` is set.
    pub fn bind(&mut self, params: &ParamSet<T>, track: bool) -> Vec<Var> {
        params
            .iter()
            .map(|p| {
                let needs = track && p.trainable;
                self.push(p.value.clone(), Op::Leaf, needs)
            })
            .collect()
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(format!("{what} must be a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn vector_len(&self, v: Var, what: &str) -> Result<usize> {
        let s = self.shape(v);
        if s.len() != 1 {
            return Err(Error::dim(format!("{what} must be a vector, got shape {s:?}")));
        }
        Ok(s[0])
    }

    /// `x W + b` with `x: [n, d_in]`, `W: [d_in, d_out]`, `b: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.matrix_dims(x, "linear input")?;
        let (wi, dout) = self.matrix_dims(w, "linear weight")?;
        if din != wi {
            return Err(Error::dim(format!(
                "linear: input shape {:?} incompatible with weight shape {:?}",
                self.shape(x),
                self.shape(w)
            )));
        }
        if let Some(b) = b {
            let bl = self.vector_len(b, "linear bias")?;
            if bl != dout {
                return Err(Error::dim(format!(
                    "linear: bias shape {:?} incompatible with weight shape {:?}",
                    self.shape(b),
                    self.shape(w)
                )));
            }
        }
        let mut out = vec![T::zero(); n * dout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            T::one(),
            View::dense(self.value(x).data(), n, din),
            View::dense(self.value(w).data(), din, dout),
            T::one(),
            ViewMut::dense(&mut out, n, dout),
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::new(vec![n, dout], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = Tensor::new(
            self.shape(x).to_vec(),
            self.value(x).data().iter().map(|&v| f(v)).collect(),
        )
        .expect("elementwise shape");
        let needs = self.needs(x);
        self.push(value, op, needs)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, |v| v.fast_tanh(), Op::Tanh(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, |v| gelu_parts(v).0, Op::Gelu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, softplus, Op::Softplus(x))
    }

    /// Row-wise normalization to zero mean and unit population variance
    /// followed by the affine map `gain * x_hat + shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: T) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "layer_norm input")?;
        if d == 0 {
            return Err(Error::dim("layer_norm over an empty last dimension"));
        }
        let gl = self.vector_len(gain, "layer_norm gain")?;
        let sl = self.vector_len(shift, "layer_norm shift")?;
        if gl != d || sl != d {
            return Err(Error::dim(format!(
                "layer_norm: gain {:?} / shift {:?} do not match width {d}",
                self.shape(gain),
                self.shape(shift)
            )));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let s = self.value(shift).data();
        let dn = T::of(d as f64);
        let mut out = vec![T::zero(); n * d];
        let mut rstd = Vec::with_capacity(n);
        for (row, orow) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            for j in 0..d {
                orow[j] = (row[j] - mean) * r * g[j] + s[j];
            }
            rstd.push(r);
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(shift);
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                shift,
                rstd,
            },
            needs,
        ))
    }

    /// Scaled dot-product attention over `batch` independent sequences.
    ///
    /// `q` is `[batch * tq, d]`, `k` and `v` are `[batch * tk, d]`; rows of
    /// sequence `s` are contiguous. Each of the `heads` heads uses a contiguous
    /// `d / heads` column block with scale `1 / sqrt(d / heads)`. With `causal`,
    /// query position `i` attends to key positions `<= i` only (requires
    /// `tq == tk`). No projections are applied here.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let (rq, d) = self.matrix_dims(q, "attention query")?;
        let (rk, dk) = self.matrix_dims(k, "attention key")?;
        let (rv, dv) = self.matrix_dims(v, "attention value")?;
        if dk != d || dv != d || rk != rv {
            return Err(Error::dim(format!(
                "attention: q {:?}, k {:?}, v {:?} are inconsistent",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        if batch == 0 || rq % batch != 0 || rk % batch != 0 {
            return Err(Error::dim(format!(
                "attention: {rq} query rows / {rk} key rows do not split into {batch} sequences"
            )));
        }
        let (tq, tk) = (rq / batch, rk / batch);
        if causal && tq != tk {
            return Err(Error::dim(format!(
                "causal attention needs equal query/key lengths, got {tq} and {tk}"
            )));
        }
        if tk == 0 && tq > 0 {
            return Err(Error::dim("attention over an empty key sequence"));
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![T::zero(); batch * heads * tq * tk];
        let mut out = vec![T::zero(); rq * d];
        for s in 0..batch {
            for h in 0..heads {
                let pblk = (s * heads + h) * tq * tk;
                let p = &mut probs[pblk..pblk + tq * tk];
                gemm(
                    scale,
                    View::block(qd, s * tq * d + h * dh, tq, dh, d),
                    View::block(kd, s * tk * d + h * dh, tk, dh, d).t(),
                    T::zero(),
                    ViewMut::dense(p, tq, tk),
                );
                for i in 0..tq {
                    let row = &mut p[i * tk..(i + 1) * tk];
                    let lim = if causal { i + 1 } else { tk };
                    let mx = row[..lim]
                        .iter()
                        .copied()
                        .fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for x in &mut row[..lim] {
                        *x = (*x - mx).fast_exp();
                        z = z + *x;
                    }
                    for x in &mut row[..lim] {
                        *x = *x / z;
                    }
                    for x in &mut row[lim..] {
                        *x = T::zero();
                    }
                }
                gemm(
                    T::one(),
                    View::dense(p, tq, tk),
                    View::block(vd, s * tk * d + h * dh, tk, dh, d),
                    T::zero(),
                    ViewMut::block(&mut out, s * tq * d + h * dh, tq, dh, d),
                );
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        let value = Tensor::new(vec![rq, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            },
            needs,
        ))
    }

    /// Elman recurrence `h_t = tanh(x_t W_in + h_{t-1} W_rec + bias)` run over
    /// `x.rows() / steps` independent sequences of `steps` rows each, every
    /// sequence starting from `h0`. Returns all hidden states, same row layout
    /// as `x`.
    pub fn rnn_scan(
        &mut self,
        x: Var,
        w_in: Var,
        w_rec: Var,
        bias: Var,
        h0: Var,
        steps: usize,
    ) -> Result<Var> {
        let (rows, din) = self.matrix_dims(x, "rnn input")?;
        let (wi, h) = self.matrix_dims(w_in, "rnn input weight")?;
        let (wr0, wr1) = self.matrix_dims(w_rec, "rnn recurrent weight")?;
        let bl = self.vector_len(bias, "rnn bias")?;
        let hl = self.vector_len(h0, "rnn initial state")?;
        if wi != din || wr0 != h || wr1 != h || bl != h || hl != h {
            return Err(Error::dim(format!(
                "rnn_scan: x {:?}, W_in {:?}, W_rec {:?}, bias {:?}, h0 {:?} are inconsistent",
                self.shape(x),
                self.shape(w_in),
                self.shape(w_rec),
                self.shape(bias),
                self.shape(h0)
            )));
        }
        if steps == 0 || rows % steps != 0 {
            return Err(Error::dim(format!(
                "rnn_scan: {rows} rows do not split into sequences of {steps} steps"
            )));
        }
        let seqs = rows / steps;
        let mut out = vec![T::zero(); rows * h];
        for row in out.chunks_exact_mut(h) {
            row.copy_from_slice(self.value(bias).data());
        }
        gemm(
            T::one(),
            View::dense(self.value(x).data(), rows, din),
            View::dense(self.value(w_in).data(), din, h),
            T::one(),
            ViewMut::dense(&mut out, rows, h),
        );
        let wr = self.value(w_rec).data();
        let h0w = self.value(h0).matmul_vec(wr, h);
        let mut prev = vec![T::zero(); seqs * h];
        for t in 0..steps {
            if t == 0 {
                for s in 0..seqs {
                    let o = (s * steps) * h;
                    for j in 0..h {
                        out[o + j] = out[o + j] + h0w[j];
                    }
                }
            } else {
                for s in 0..seqs {
                    let o = (s * steps + t - 1) * h;
                    prev[s * h..(s + 1) * h].copy_from_slice(&out[o..o + h]);
                }
                gemm(
                    T::one(),
                    View::dense(&prev, seqs, h),
                    View::dense(wr, h, h),
                    T::one(),
                    ViewMut::block(&mut out, t * h, seqs, h, steps * h),
                );
            }
            for s in 0..seqs {
                let o = (s * steps + t) * h;
                for v in &mut out[o..o + h] {
                    *v = v.fast_tanh();
                }
            }
        }
        let needs = [x, w_in, w_rec, bias, h0].iter().any(|&v| self.needs(v));
        let value = Tensor::new(vec![rows, h], out)?;
        Ok(self.push(
            value,
            Op::RnnScan {
                x,
                w_in,
                w_rec,
                bias,
                h0,
                steps,
            },
            needs,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "gather input")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::dim(format!("gather: row {bad} out of range for {n} rows")));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            out.extend_from_slice(&xs[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![idx.len(), d], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::GatherRows { x, idx }, needs))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let (_, d) = self.matrix_dims(first, "concat input")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (n, dp) = self.matrix_dims(p, "concat input")?;
            if dp != d {
                return Err(Error::dim(format!(
                    "concat: widths {d} and {dp} differ"
                )));
            }
            rows += n;
            out.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let value = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), needs))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "slice input")?;
        if start + len > d {
            return Err(Error::dim(format!(
                "slice: columns {start}..{} out of range for width {d}",
                start + len
            )));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for row in xs.chunks_exact(d) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(vec![n, len], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SliceCols { x, start }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.value(x).data().iter().copied().sum::<T>() / T::of(n as f64);
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    /// Mean over all elements of `0.5 ln(2 pi) + ln sigma + (y - mu)^2 / (2 sigma^2)`.
    pub fn gaussian_nll(&mut self, mu: Var, sigma: Var, target: &Tensor<T>) -> Result<Var> {
        self.same_shape(mu, sigma, "gaussian_nll")?;
        if self.value(mu).len() != target.len() {
            return Err(Error::dim(format!(
                "gaussian_nll: prediction shape {:?} vs target shape {:?}",
                self.shape(mu),
                target.shape()
            )));
        }
        let value = nll_value(self.value(mu).data(), self.value(sigma).data(), target.data());
        if !value.is_finite() {
            return Err(Error::Numeric("non-finite Gaussian NLL".into()));
        }
        let needs = self.needs(mu) || self.needs(sigma);
        Ok(self.push(
            Tensor::scalar(value),
            Op::GaussianNll {
                mu,
                sigma,
                target: target.data().to_vec(),
            },
            needs,
        ))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, g: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, din) = (self.value(*x).rows(), self.value(*x).cols());
                let dout = self.value(*w).cols();
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * din];
                    gemm(
                        T::one(),
                        View::dense(gy, n, dout),
                        View::dense(val(*w), din, dout).t(),
                        T::zero(),
                        ViewMut::dense(&mut dx, n, din),
                    );
                    acc(*x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); din * dout];
                    gemm(
                        T::one(),
                        View::dense(val(*x), n, din).t(),
                        View::dense(gy, n, dout),
                        T::zero(),
                        ViewMut::dense(&mut dw, din, dout),
                    );
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    acc(*b, col_sums(gy, dout));
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(
                        T::one(),
                        View::dense(gy, m, n),
                        View::dense(val(*b), k, n).t(),
                        T::zero(),
                        ViewMut::dense(&mut da, m, k),
                    );
                    acc(*a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(
                        T::one(),
                        View::dense(val(*a), m, k).t(),
                        View::dense(gy, m, n),
                        T::zero(),
                        ViewMut::dense(&mut db, k, n),
                    );
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, gy.to_vec());
                acc(*b, gy.to_vec());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, gy.iter().zip(bv).map(|(g, y)| *g * *y).collect());
                acc(*b, gy.iter().zip(av).map(|(g, x)| *g * *x).collect());
            }
            Op::Scale(x, c) => acc(*x, gy.iter().map(|g| *g * *c).collect()),
            Op::AddScalar(x) => acc(*x, gy.to_vec()),
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(
                    *x,
                    gy.iter()
                        .zip(y)
                        .map(|(g, t)| *g * (T::one() - *t * *t))
                        .collect(),
                );
            }
            Op::Gelu(x) => acc(
                *x,
                gy.iter()
                    .zip(val(*x))
                    .map(|(g, v)| *g * gelu_parts(*v).1)
                    .collect(),
            ),
            Op::Softplus(x) => acc(
                *x,
                gy.iter().zip(val(*x)).map(|(g, v)| *g * sigmoid(*v)).collect(),
            ),
            Op::LayerNorm {
                x,
                gain,
                shift,
                rstd,
            } => {
                let d = self.value(*x).cols();
                let xs = val(*x);
                let g = val(*gain);
                let dn = T::of(d as f64);
                let mut dx = vec![T::zero(); xs.len()];
                let mut dg = vec![T::zero(); d];
                let mut ds = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxh = vec![T::zero(); d];
                for (r, ((row, gr), dxr)) in xs
                    .chunks_exact(d)
                    .zip(gy.chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                    .enumerate()
                {
                    let mean = row.iter().copied().sum::<T>() / dn;
                    let rs = rstd[r];
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * rs;
                        dxh[j] = gr[j] * g[j];
                        dg[j] = dg[j] + gr[j] * xhat[j];
                        ds[j] = ds[j] + gr[j];
                    }
                    let m1 = dxh.iter().copied().sum::<T>() / dn;
                    let m2 = dxh.iter().zip(&xhat).map(|(a, b)| *a * *b).sum::<T>() / dn;
                    for j in 0..d {
                        dxr[j] = rs * (dxh[j] - m1 - xhat[j] * m2);
                    }
                }
                acc(*x, dx);
                acc(*gain, dg);
                acc(*shift, ds);
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            } => {
                let (batch, heads) = (*batch, *heads);
                let d = self.value(*q).cols();
                let (tq, tk) = (self.value(*q).rows() / batch, self.value(*k).rows() / batch);
                let dh = d / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let mut dq = vec![T::zero(); qd.len()];
                let mut dk = vec![T::zero(); kd.len()];
                let mut dv = vec![T::zero(); vd.len()];
                let mut dp = vec![T::zero(); tq * tk];
                for s in 0..batch {
                    for h in 0..heads {
                        let pblk = (s * heads + h) * tq * tk;
                        let p = &probs[pblk..pblk + tq * tk];
                        let qo = s * tq * d + h * dh;
                        let ko = s * tk * d + h * dh;
                        gemm(
                            T::one(),
                            View::block(gy, qo, tq, dh, d),
                            View::block(vd, ko, tk, dh, d).t(),
                            T::zero(),
                            ViewMut::dense(&mut dp, tq, tk),
                        );
                        gemm(
                            T::one(),
                            View::dense(p, tq, tk).t(),
                            View::block(gy, qo, tq, dh, d),
                            T::one(),
                            ViewMut::block(&mut dv, ko, tk, dh, d),
                        );
                        for i in 0..tq {
                            let pr = &p[i * tk..(i + 1) * tk];
                            let dr = &mut dp[i * tk..(i + 1) * tk];
                            let dot = pr.iter().zip(dr.iter()).map(|(a, b)| *a * *b).sum::<T>();
                            for j in 0..tk {
                                dr[j] = pr[j] * (dr[j] - dot) * scale;
                            }
                        }
                        gemm(
                            T::one(),
                            View::dense(&dp, tq, tk),
                            View::block(kd, ko, tk, dh, d),
                            T::one(),
                            ViewMut::block(&mut dq, qo, tq, dh, d),
                        );
                        gemm(
                            T::one(),
                            View::dense(&dp, tq, tk).t(),
                            View::block(qd, qo, tq, dh, d),
                            T::one(),
                            ViewMut::block(&mut dk, ko, tk, dh, d),
                        );
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::RnnScan {
                x,
                w_in,
                w_rec,
                bias,
                h0,
                steps,
            } => {
                let steps = *steps;
                let hs = node.value.data();
                let rows = node.value.rows();
                let h = node.value.cols();
                let din = self.value(*x).cols();
                let seqs = rows / steps;
                let wr = val(*w_rec);
                let h0v = val(*h0);
                // dA: adjoint of the pre-activation of every step.
                let mut da = vec![T::zero(); rows * h];
                let mut carry = vec![T::zero(); seqs * h];
                let mut gt = vec![T::zero(); seqs * h];
                let mut hprev = vec![T::zero(); seqs * h];
                let mut dwr = vec![T::zero(); h * h];
                let mut g0 = vec![T::zero(); h];
                for t in (0..steps).rev() {
                    for s in 0..seqs {
                        let o = (s * steps + t) * h;
                        for j in 0..h {
                            let y = hs[o + j];
                            let g = (gy[o + j] + carry[s * h + j]) * (T::one() - y * y);
                            da[o + j] = g;
                            gt[s * h + j] = g;
                        }
                    }
                    if t > 0 {
                        gemm(
                            T::one(),
                            View::dense(&gt, seqs, h),
                            View::dense(wr, h, h).t(),
                            T::zero(),
                            ViewMut::dense(&mut carry, seqs, h),
                        );
                        for s in 0..seqs {
                            let o = (s * steps + t - 1) * h;
                            hprev[s * h..(s + 1) * h].copy_from_slice(&hs[o..o + h]);
                        }
                        gemm(
                            T::one(),
                            View::dense(&hprev, seqs, h).t(),
                            View::dense(&gt, seqs, h),
                            T::one(),
                            ViewMut::dense(&mut dwr, h, h),
                        );
                    } else {
                        for s in 0..seqs {
                            for j in 0..h {
                                g0[j] = g0[j] + gt[s * h + j];
                            }
                        }
                    }
                }
                // Contribution of the shared initial state.
                for i in 0..h {
                    for j in 0..h {
                        dwr[i * h + j] = dwr[i * h + j] + h0v[i] * g0[j];
                    }
                }
                if self.needs(*h0) {
                    let mut dh0 = vec![T::zero(); h];
                    for i in 0..h {
                        dh0[i] = (0..h).map(|j| wr[i * h + j] * g0[j]).sum();
                    }
                    acc(*h0, dh0);
                }
                acc(*w_rec, dwr);
                acc(*bias, col_sums(&da, h));
                if self.needs(*w_in) {
                    let mut dwi = vec![T::zero(); din * h];
                    gemm(
                        T::one(),
                        View::dense(val(*x), rows, din).t(),
                        View::dense(&da, rows, h),
                        T::zero(),
                        ViewMut::dense(&mut dwi, din, h),
                    );
                    acc(*w_in, dwi);
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); rows * din];
                    gemm(
                        T::one(),
                        View::dense(&da, rows, h),
                        View::dense(val(*w_in), din, h).t(),
                        T::zero(),
                        ViewMut::dense(&mut dx, rows, din),
                    );
                    acc(*x, dx);
                }
            }
            Op::GatherRows { x, idx } => {
                let d = node.value.cols();
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        dx[i * d + j] = dx[i * d + j] + gy[r * d + j];
                    }
                }
                acc(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, gy[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let d = self.value(*x).cols();
                let len = node.value.cols();
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (r, g) in gy.chunks_exact(len).enumerate() {
                    dx[r * d + start..r * d + start + len].copy_from_slice(g);
                }
                acc(*x, dx);
            }
            Op::Sum(x) => acc(*x, vec![gy[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![gy[0] / T::of(n.max(1) as f64); n]);
            }
            Op::GaussianNll { mu, sigma, target } => {
                let (m, s) = (val(*mu), val(*sigma));
                let n = T::of(target.len().max(1) as f64);
                let g = gy[0] / n;
                let mut dm = Vec::with_capacity(m.len());
                let mut dsg = Vec::with_capacity(m.len());
                for ((&mu, &sg), &y) in m.iter().zip(s).zip(target) {
                    let r = y - mu;
                    let inv = T::one() / (sg * sg);
                    dm.push(-g * r * inv);
                    dsg.push(g * (T::one() / sg - r * r * inv / sg));
                }
                acc(*mu, dm);
                acc(*sigma, dsg);
            }
        }
    }
}

impl<T: Real> Tensor<T> {
    /// Row vector times a dense `[len, n]` matrix.
    fn matmul_vec(&self, w: &[T], n: usize) -> Vec<T> {
        let x = self.data();
        let mut out = vec![T::zero(); n];
        for (i, xi) in x.iter().enumerate() {
            for j in 0..n {
                out[j] = out[j] + *xi * w[i * n + j];
            }
        }
        out
    }
}

fn col_sums<T: Real>(g: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); d];
    for row in g.chunks_exact(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o = *o + *v;
        }
    }
    out
}

/// Mean Gaussian negative log-likelihood over matched elements.
pub(crate) fn nll_value<T: Real>(mu: &[T], sigma: &[T], y: &[T]) -> T {
    let half_ln_2pi = T::of(0.5 * (2.0 * std::f64::consts::PI).ln());
    let two = T::of(2.0);
    let n = T::of(y.len().max(1) as f64);
    let total: T = mu
        .iter()
        .zip(sigma)
        .zip(y)
        .map(|((&m, &s), &t)| half_ln_2pi + s.ln() + (t - m) * (t - m) / (two * s * s))
        .sum();
    total / n
}
