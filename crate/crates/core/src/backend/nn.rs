//! Composite layers built from tape primitives.

use super::tape::{Tape, Var};
use super::tensor::Real;
use crate::error::Result;

/// Projection weights of one multi-head attention block.
///
/// The key projection has no bias: a key bias adds the same logit to every key
/// of a query row and cancels in the softmax.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Multi-head attention with input and output projections.
///
/// `xq` holds `batch` query sequences, `xk`/`xv` the matching key/value
/// sequences (see [`Tape::attention`] for the row layout).
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<T: Real>(
    tape: &mut Tape<T>,
    xq: Var,
    xk: Var,
    xv: Var,
    w: &AttentionVars,
    heads: usize,
    batch: usize,
    causal: bool,
) -> Result<Var> {
    let q = tape.linear(xq, w.wq, Some(w.bq))?;
    let k = tape.linear(xk, w.wk, None)?;
    let v = tape.linear(xv, w.wv, Some(w.bv))?;
    let a = tape.attention(q, k, v, batch, heads, causal)?;
    tape.linear(a, w.wo, Some(w.bo))
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Position-wise `linear -> GELU -> linear`.
pub fn feed_forward<T: Real>(tape: &mut Tape<T>, x: Var, w: &FeedForwardVars) -> Result<Var> {
    let h = tape.linear(x, w.w1, Some(w.b1))?;
    let h = tape.gelu(h);
    tape.linear(h, w.w2, Some(w.b2))
}
