//! Decision network: VPC tokenizes E_V, DPC refines E_S with filters drawn
//! from E_V, OFC embeds the navigation command, MPC fuses all tokens with a
//! transformer and CPC maps the pooled latent to (steer, accel).

use bid_tensor::{multihead_attention, AttentionVars, Bound, Graph, ParamStore, Result, Scalar, TensorError, Var};
use rand::Rng;

use crate::perception::{generate_dynamic_filters, init_filter_gen};

pub(crate) fn init_linear<T: Scalar>(p: &mut ParamStore<T>, name: &str, out: usize, inp: usize, rng: &mut impl Rng) -> Result<()> {
    p.init_uniform(&format!("{name}.weight"), &[out, inp], inp, rng)?;
    p.init_zeros(&format!("{name}.bias"), &[out])
}

pub(crate) fn linear<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{name}.weight"))?;
    let b = p.var(&format!("{name}.bias"))?;
    g.linear(x, w, Some(b))
}

fn token_norm<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let gain = p.var(&format!("{name}.gain"))?;
    let bias = p.var(&format!("{name}.bias"))?;
    g.layer_norm(x, gain, bias, 1)
}

// ---- transformer encoder layer ------------------------------------------------

pub fn init_encoder<T: Scalar>(p: &mut ParamStore<T>, name: &str, d: usize, ff: usize, rng: &mut impl Rng) -> Result<()> {
    p.init_ones(&format!("{name}.ln1.gain"), &[d])?;
    p.init_zeros(&format!("{name}.ln1.bias"), &[d])?;
    AttentionVars::init(p, &format!("{name}.attn"), d, rng)?;
    p.init_ones(&format!("{name}.ln2.gain"), &[d])?;
    p.init_zeros(&format!("{name}.ln2.bias"), &[d])?;
    init_linear(p, &format!("{name}.ff1"), ff, d, rng)?;
    init_linear(p, &format!("{name}.ff2"), d, ff, rng)
}

/// Pre-norm encoder layer: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
/// Returns the new tokens and the attention weights.
pub fn encoder_forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, heads: usize, x: Var) -> Result<(Var, Var)> {
    let h = token_norm(g, p, &format!("{name}.ln1"), x)?;
    let att = multihead_attention(g, h, &AttentionVars::from_bound(p, &format!("{name}.attn"))?, heads)?;
    let x = g.add(x, att.out)?;
    let h = token_norm(g, p, &format!("{name}.ln2"), x)?;
    let h = linear(g, p, &format!("{name}.ff1"), h)?;
    let h = g.relu(h)?;
    let h = linear(g, p, &format!("{name}.ff2"), h)?;
    Ok((g.add(x, h)?, att.weights))
}

pub struct Stack {
    pub out: Var,
    pub attention: Vec<Var>,
}

pub fn encoder_stack<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, layers: usize, heads: usize, x: Var) -> Result<Stack> {
    let mut x = x;
    let mut attention = Vec::with_capacity(layers);
    for i in 0..layers {
        let (y, w) = encoder_forward(g, p, &format!("{name}.enc{i}"), heads, x)?;
        x = y;
        attention.push(w);
    }
    Ok(Stack { out: x, attention })
}

// ---- tokenization -------------------------------------------------------------

/// `(B, C, h, w)` → `(B, h·w, C)`, one token per spatial cell in row-major order.
pub fn flatten_tokens<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(TensorError::Shape { op: "flatten_tokens", expected: "(B, C, h, w)".into(), got: format!("{s:?}") });
    }
    let x = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.permute(x, &[0, 2, 1])
}

/// Linear projection to `d_model` plus a learned positional table.
pub fn init_tokenizer<T: Scalar>(p: &mut ParamStore<T>, name: &str, tokens: usize, in_ch: usize, d: usize, rng: &mut impl Rng) -> Result<()> {
    init_linear(p, &format!("{name}.proj"), d, in_ch, rng)?;
    p.init_uniform(&format!("{name}.pos"), &[tokens, d], d, rng)
}

pub fn tokenize<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, map: Var, use_pos: bool) -> Result<Var> {
    let t = flatten_tokens(g, map)?;
    let pos = p.var(&format!("{name}.pos"))?;
    let (n, tn) = (g.shape(t)[1], g.shape(pos)[0]);
    if n != tn {
        return Err(TensorError::Config(format!("{name}: {n} tokens but positional table holds {tn}")));
    }
    let t = linear(g, p, &format!("{name}.proj"), t)?;
    if use_pos {
        g.add_bcast(t, pos)
    } else {
        Ok(t)
    }
}

pub struct BranchOut {
    /// Tokens entering the encoder (projection + position).
    pub tokens: Var,
    pub out: Var,
    pub attention: Vec<Var>,
}

// ---- VPC ------------------------------------------------------------------------

pub fn vpc_forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, ev: Var, layers: usize, heads: usize, use_pos: bool) -> Result<BranchOut> {
    let tokens = tokenize(g, p, "vpc", ev, use_pos)?;
    let s = encoder_stack(g, p, "vpc", layers, heads, tokens)?;
    Ok(BranchOut { tokens, out: s.out, attention: s.attention })
}

// ---- DPC ------------------------------------------------------------------------

pub fn init_dpc<T: Scalar>(p: &mut ParamStore<T>, ev_ch: usize, k: usize, rng: &mut impl Rng) -> Result<()> {
    init_filter_gen(p, "dpc.filter_gen", ev_ch, k, rng)
}

pub struct DpcOut {
    pub filters: Var,
    pub filtered: Var,
    pub branch: BranchOut,
}

/// Filters generated from E_V (average-pooled onto the E_S grid) are applied
/// per location to E_S; the filtered map is tokenized like VPC.
pub fn dpc_forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, es: Var, ev: Var, k: usize, layers: usize, heads: usize) -> Result<DpcOut> {
    let (se, sv) = (g.shape(es).to_vec(), g.shape(ev).to_vec());
    if se.len() != 4 || sv.len() != 4 || se[0] != sv[0] {
        return Err(TensorError::Shape { op: "dpc_forward", expected: "E_S and E_V as (B, C, h, w)".into(), got: format!("{se:?} / {sv:?}") });
    }
    let pooled = g.adaptive_avg_pool2d(ev, se[2], se[3])?;
    let filters = generate_dynamic_filters(g, p, "dpc.filter_gen", pooled)?;
    let filtered = g.local_filter(es, filters, k)?;
    let tokens = tokenize(g, p, "dpc", filtered, true)?;
    let s = encoder_stack(g, p, "dpc", layers, heads, tokens)?;
    Ok(DpcOut { filters, filtered, branch: BranchOut { tokens, out: s.out, attention: s.attention } })
}

// ---- OFC ------------------------------------------------------------------------

/// `E_N = W · one_hot + b`, shaped `(B, 1, d)` so it joins the token sequence.
pub fn ofc_encode<T: Scalar>(g: &mut Graph<T>, p: &Bound, commands: Var) -> Result<Var> {
    let s = g.shape(commands).to_vec();
    if s.len() != 2 || s[1] != 4 {
        return Err(TensorError::Shape { op: "ofc_encode", expected: "one-hot commands (B, 4)".into(), got: format!("{s:?}") });
    }
    let e = linear(g, p, "ofc", commands)?;
    let d = g.shape(e)[1];
    g.reshape(e, &[s[0], 1, d])
}

// ---- MPC + CPC ----------------------------------------------------------------

/// Concatenates the token groups in the given order and runs the fusion encoder.
pub fn mpc_forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, groups: &[Var], layers: usize, heads: usize) -> Result<Stack> {
    let d = g.shape(groups[0])[2];
    for &v in groups {
        if g.shape(v).len() != 3 || g.shape(v)[2] != d {
            return Err(TensorError::Config(format!("mpc token dim mismatch: {:?} vs d_model {d}", g.shape(v))));
        }
    }
    let x = g.concat(groups, 1)?;
    encoder_stack(g, p, "mpc", layers, heads, x)
}

pub fn init_cpc<T: Scalar>(p: &mut ParamStore<T>, d: usize, hidden: usize, rng: &mut impl Rng) -> Result<()> {
    init_linear(p, "cpc.fc1", hidden, d, rng)?;
    init_linear(p, "cpc.fc2", hidden, hidden, rng)?;
    init_linear(p, "cpc.fc3", 2, hidden, rng)
}

/// Token mean → fc → relu → fc → relu → fc → tanh, giving `(B, 2)` in [-1, 1].
pub fn cpc_head<T: Scalar>(g: &mut Graph<T>, p: &Bound, latent: Var) -> Result<Var> {
    let x = g.mean_axis(latent, 1)?;
    let x = linear(g, p, "cpc.fc1", x)?;
    let x = g.relu(x)?;
    let x = linear(g, p, "cpc.fc2", x)?;
    let x = g.relu(x)?;
    let x = linear(g, p, "cpc.fc3", x)?;
    g.tanh(x)
}
