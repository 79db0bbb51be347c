use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{shape_err, Result, TensorError};

/// Projection weights of one multi-head self-attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

const PROJ: [&str; 4] = ["q", "k", "v", "o"];

impl AttentionVars {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize, rng: &mut impl Rng) -> Result<()> {
        for p in PROJ {
            store.init_uniform(&format!("{prefix}.w{p}"), &[dim, dim], dim, rng)?;
            store.init_zeros(&format!("{prefix}.b{p}"), &[dim])?;
        }
        Ok(())
    }

    pub fn from_bound(b: &Bound, prefix: &str) -> Result<Self> {
        let v = |n: &str| b.var(&format!("{prefix}.{n}"));
        Ok(AttentionVars {
            wq: v("wq")?,
            bq: v("bq")?,
            wk: v("wk")?,
            bk: v("bk")?,
            wv: v("wv")?,
            bv: v("bv")?,
            wo: v("wo")?,
            bo: v("bo")?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `(B, L, D)`, same shape as the input tokens.
    pub out: Var,
    /// Softmax weights `(B·heads, L, L)`; every row sums to one.
    pub weights: Var,
}

/// Scaled dot-product self-attention over `(B, L, D)` tokens.
pub fn multihead_attention<T: Scalar>(g: &mut Graph<T>, tokens: Var, p: &AttentionVars, n_heads: usize) -> Result<AttentionOutput> {
    let shape = g.shape(tokens).to_vec();
    if shape.len() != 3 {
        return Err(shape_err("multihead_attention", "tokens (B, L, D)", shape));
    }
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    if n_heads == 0 || d % n_heads != 0 {
        return Err(TensorError::Config(format!("token dim {d} not divisible by {n_heads} heads")));
    }
    let dh = d / n_heads;
    let split = |g: &mut Graph<T>, x: Var| -> Result<Var> {
        let x = g.reshape(x, &[b, l, n_heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * n_heads, l, dh])
    };
    let q = g.linear(tokens, p.wq, Some(p.bq))?;
    let k = g.linear(tokens, p.wk, Some(p.bk))?;
    let v = g.linear(tokens, p.wv, Some(p.bv))?;
    let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
    let scores = g.bmm(q, k, false, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let weights = g.softmax(scores, 2)?;
    let ctx = g.bmm(weights, v, false, false)?;
    let ctx = g.reshape(ctx, &[b, n_heads, l, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, l, d])?;
    let out = g.linear(ctx, p.wo, Some(p.bo))?;
    Ok(AttentionOutput { out, weights })
}
