//! Perception network. The ventral chain V1 → V2 → V4 → IT produces the
//! appearance embedding E_V; the dorsal path turns V1 features of two
//! consecutive frames into the motion embedding E_S through per-location
//! dynamic filters.

use bid_tensor::{Bound, Graph, ParamStore, Result, Scalar, TensorError, Var};
use rand::Rng;

pub(crate) fn init_conv<T: Scalar>(p: &mut ParamStore<T>, name: &str, co: usize, ci: usize, k: usize, rng: &mut impl Rng) -> Result<()> {
    p.init_uniform(&format!("{name}.weight"), &[co, ci, k, k], ci * k * k, rng)
}

pub(crate) fn init_norm<T: Scalar>(p: &mut ParamStore<T>, name: &str, c: usize) -> Result<()> {
    p.init_ones(&format!("{name}.gain"), &[c])?;
    p.init_zeros(&format!("{name}.bias"), &[c])
}

pub(crate) fn conv<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = p.var(&format!("{name}.weight"))?;
    g.conv2d(x, w, stride, pad)
}

/// Layer norm over `(C, H, W)` of each sample with a per-channel affine.
pub(crate) fn norm<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let gain = p.var(&format!("{name}.gain"))?;
    let bias = p.var(&format!("{name}.bias"))?;
    g.layer_norm(x, gain, bias, 3)
}

fn norm_relu<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = norm(g, p, name, x)?;
    g.relu(y)
}

// ---- V1 --------------------------------------------------------------------

pub fn init_v1<T: Scalar>(p: &mut ParamStore<T>, width: usize, rng: &mut impl Rng) -> Result<()> {
    init_conv(p, "v1.conv7", width, 3, 7, rng)?;
    init_norm(p, "v1.norm1", width)?;
    init_conv(p, "v1.conv3", width, width, 3, rng)?;
    init_norm(p, "v1.norm2", width)
}

pub struct V1Out {
    /// Output of the 7×7 convolution before normalization.
    pub conv7: Var,
    pub out: Var,
}

/// conv 7×7/2 → norm → relu → maxpool 3/2 → conv 3×3 → norm → relu.
pub fn v1_forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, frames: Var) -> Result<V1Out> {
    let s = g.shape(frames);
    if s.len() != 4 || s[1] != 3 {
        return Err(TensorError::Shape { op: "v1_forward", expected: "frames (N, 3, H, W)".into(), got: format!("{s:?}") });
    }
    let conv7 = conv(g, p, "v1.conv7", frames, 2, 3)?;
    let x = norm_relu(g, p, "v1.norm1", conv7)?;
    let x = g.maxpool2d(x, 3, 2, 1)?;
    let x = conv(g, p, "v1.conv3", x, 1, 1)?;
    let out = norm_relu(g, p, "v1.norm2", x)?;
    Ok(V1Out { conv7, out })
}

// ---- recurrent cortical block ------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorBlockConfig {
    pub in_ch: usize,
    pub out_ch: usize,
    pub bottleneck: usize,
    /// Number of passes through the shared weights.
    pub steps: usize,
}

impl CorBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(TensorError::Config("cortical block needs at least one time step".into()));
        }
        if self.in_ch == 0 || self.out_ch == 0 || self.bottleneck == 0 {
            return Err(TensorError::Config("cortical block widths must be positive".into()));
        }
        Ok(())
    }
}

/// Shared convolutions plus one set of norms per time step.
pub fn init_cor_block<T: Scalar>(p: &mut ParamStore<T>, name: &str, cfg: CorBlockConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let (o, b) = (cfg.out_ch, cfg.bottleneck);
    init_conv(p, &format!("{name}.conv_in"), o, cfg.in_ch, 1, rng)?;
    init_conv(p, &format!("{name}.conv1"), b, o, 1, rng)?;
    init_conv(p, &format!("{name}.conv2"), b, b, 3, rng)?;
    init_conv(p, &format!("{name}.conv3"), o, b, 1, rng)?;
    init_conv(p, &format!("{name}.skip"), o, o, 1, rng)?;
    init_norm(p, &format!("{name}.skip_norm"), o)?;
    for t in 0..cfg.steps {
        init_norm(p, &format!("{name}.t{t}.norm1"), b)?;
        init_norm(p, &format!("{name}.t{t}.norm2"), b)?;
        init_norm(p, &format!("{name}.t{t}.norm3"), o)?;
    }
    Ok(())
}

/// Runs the bottleneck stack `steps` times, feeding each output back in.
/// The first pass downsamples by 2 on both the residual and skip paths.
pub fn cor_block_forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, steps: usize, input: Var) -> Result<Var> {
    if steps == 0 {
        return Err(TensorError::Config("cortical block needs at least one time step".into()));
    }
    let mut x = conv(g, p, &format!("{name}.conv_in"), input, 1, 0)?;
    for t in 0..steps {
        let skip = if t == 0 {
            let s = conv(g, p, &format!("{name}.skip"), x, 2, 0)?;
            norm(g, p, &format!("{name}.skip_norm"), s)?
        } else {
            x
        };
        let stride = if t == 0 { 2 } else { 1 };
        let y = conv(g, p, &format!("{name}.conv1"), x, 1, 0)?;
        let y = norm_relu(g, p, &format!("{name}.t{t}.norm1"), y)?;
        let y = conv(g, p, &format!("{name}.conv2"), y, stride, 1)?;
        let y = norm_relu(g, p, &format!("{name}.t{t}.norm2"), y)?;
        let y = conv(g, p, &format!("{name}.conv3"), y, 1, 0)?;
        let y = norm(g, p, &format!("{name}.t{t}.norm3"), y)?;
        let y = g.add(y, skip)?;
        x = g.relu(y)?;
    }
    Ok(x)
}

// ---- dorsal path ---------------------------------------------------------------

/// `k×k` filter taps per location from a feature map: a 3×3 conv to `k²`
/// channels followed by a softmax across the taps.
pub fn init_filter_gen<T: Scalar>(p: &mut ParamStore<T>, name: &str, in_ch: usize, k: usize, rng: &mut impl Rng) -> Result<()> {
    init_conv(p, name, k * k, in_ch, 3, rng)
}

pub fn generate_dynamic_filters<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, alpha: Var) -> Result<Var> {
    let logits = conv(g, p, name, alpha, 1, 1)?;
    g.softmax(logits, 1)
}

pub fn init_dorsal<T: Scalar>(p: &mut ParamStore<T>, v1_width: usize, width: usize, k: usize, rng: &mut impl Rng) -> Result<()> {
    init_filter_gen(p, "dorsal.filter_gen", v1_width, k, rng)?;
    init_conv(p, "dorsal.mt", width, v1_width, 3, rng)?;
    init_norm(p, "dorsal.mt_norm", width)?;
    init_conv(p, "dorsal.mst", width, width, 3, rng)?;
    init_norm(p, "dorsal.mst_norm", width)
}

pub struct DorsalOut {
    pub filters: Var,
    /// Current features minus the dynamically filtered previous features.
    pub residual: Var,
    pub mt: Var,
    /// Motion embedding E_S.
    pub es: Var,
}

/// Filters come from the current V1 features; they are applied to the
/// previous features and the result subtracted from the current ones, then
/// two stride-2 stages (MT, MST) produce E_S.
pub fn dorsal_forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, feat_t: Var, feat_prev: Var, k: usize) -> Result<DorsalOut> {
    if g.shape(feat_t) != g.shape(feat_prev) {
        return Err(TensorError::Shape {
            op: "dorsal_forward",
            expected: format!("{:?}", g.shape(feat_t)),
            got: format!("{:?}", g.shape(feat_prev)),
        });
    }
    let filters = generate_dynamic_filters(g, p, "dorsal.filter_gen", feat_t)?;
    let residual = dorsal_residual(g, feat_t, feat_prev, filters, k)?;
    let mt = conv(g, p, "dorsal.mt", residual, 2, 1)?;
    let mt = norm_relu(g, p, "dorsal.mt_norm", mt)?;
    let es = conv(g, p, "dorsal.mst", mt, 2, 1)?;
    let es = norm_relu(g, p, "dorsal.mst_norm", es)?;
    Ok(DorsalOut { filters, residual, mt, es })
}

/// `feat_t - filter(feat_prev)`, written as `(feat_t - feat_prev) + residual(feat_prev)`
/// so that identical constant maps give exactly zero.
pub fn dorsal_residual<T: Scalar>(g: &mut Graph<T>, feat_t: Var, feat_prev: Var, filters: Var, k: usize) -> Result<Var> {
    let change = g.sub(feat_t, feat_prev)?;
    let own = g.local_residual(feat_prev, filters, k)?;
    g.add(change, own)
}
