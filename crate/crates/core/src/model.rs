//! Full agent `A = π_θ(f_t, n_t)`: perception followed by decision.

use bid_tensor::{Bound, Graph, ParamStore, Result, Scalar, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decision::{self, init_cpc, init_dpc, init_encoder, init_linear, init_tokenizer};
use crate::perception::{self, init_cor_block, init_dorsal, init_v1, CorBlockConfig, DorsalOut};

/// Ablation variants. Every variant except the full model runs each cortical
/// area once instead of recurrently.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Ventral stream, VPC and the MLP head only.
    #[serde(rename = "L_b")]
    Base,
    /// Adds the dorsal stream, DPC and MPC fusion.
    #[serde(rename = "L_D")]
    Dorsal,
    /// Adds the command embedding and MPC fusion.
    #[serde(rename = "L_N")]
    Nav,
    #[serde(rename = "L_D+L_N")]
    DorsalNav,
    /// Both branches and recurrent cortical areas.
    #[serde(rename = "L_BID")]
    Bid,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Base, Variant::Dorsal, Variant::Nav, Variant::DorsalNav, Variant::Bid];

    pub fn dorsal(self) -> bool {
        matches!(self, Variant::Dorsal | Variant::DorsalNav | Variant::Bid)
    }

    pub fn command(self) -> bool {
        matches!(self, Variant::Nav | Variant::DorsalNav | Variant::Bid)
    }

    pub fn fusion(self) -> bool {
        self != Variant::Base
    }

    pub fn recurrent(self) -> bool {
        self == Variant::Bid
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "L_b",
            Variant::Dorsal => "L_D",
            Variant::Nav => "L_N",
            Variant::DorsalNav => "L_D+L_N",
            Variant::Bid => "L_BID",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Channel widths of V1, V2, V4 and IT.
    pub widths: [usize; 4],
    /// Bottleneck width is `out / bottleneck_div`.
    pub bottleneck_div: usize,
    /// Time steps of V2, V4 and IT.
    pub recurrence: [usize; 3],
    /// Dynamic filter size.
    pub filter_k: usize,
    /// Channel width of MT/MST and thus of E_S.
    pub dorsal_width: usize,
    pub d_model: usize,
    pub heads: usize,
    pub vpc_layers: usize,
    pub dpc_layers: usize,
    pub mpc_layers: usize,
    /// Feed-forward width is `ff_mult · d_model`.
    pub ff_mult: usize,
    pub cpc_hidden: usize,
    pub variant: Variant,
    /// Additional output heads (value, speed); none are supported, only steer and accel are supervised.
    pub extra_heads: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_height: 96,
            input_width: 96,
            widths: [64, 128, 256, 512],
            bottleneck_div: 4,
            recurrence: [2, 4, 2],
            filter_k: 3,
            dorsal_width: 256,
            d_model: 256,
            heads: 4,
            vpc_layers: 1,
            dpc_layers: 1,
            mpc_layers: 4,
            ff_mult: 2,
            cpc_hidden: 256,
            variant: Variant::Bid,
            extra_heads: Vec::new(),
        }
    }
}

fn conv_out(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

impl ModelConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.input_height < 16 || self.input_width < 16 || self.input_height % 16 != 0 || self.input_width % 16 != 0 {
            return Err(format!("input {}x{} must be a positive multiple of 16", self.input_height, self.input_width));
        }
        if self.widths.iter().any(|&w| w == 0) || self.bottleneck_div == 0 || self.widths[1..].iter().any(|&w| w < self.bottleneck_div) {
            return Err("channel widths must be positive and at least bottleneck_div".into());
        }
        if self.recurrence.iter().any(|&t| t == 0) {
            return Err("recurrence counts must be at least 1".into());
        }
        if self.filter_k % 2 == 0 {
            return Err(format!("filter_k must be odd, got {}", self.filter_k));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.dorsal_width == 0 || self.ff_mult == 0 || self.cpc_hidden == 0 {
            return Err("dorsal_width, ff_mult and cpc_hidden must be positive".into());
        }
        if let Some(h) = self.extra_heads.first() {
            return Err(format!("extra head `{h}` is not supported: only steer and accel are supervised"));
        }
        Ok(())
    }

    /// Time steps actually run for V2, V4 and IT under the configured variant.
    pub fn steps(&self) -> [usize; 3] {
        if self.variant.recurrent() {
            self.recurrence
        } else {
            [1, 1, 1]
        }
    }

    pub fn v1_grid(&self) -> (usize, usize) {
        let f = |n| conv_out(conv_out(n, 7, 2, 3), 3, 2, 1);
        (f(self.input_height), f(self.input_width))
    }

    pub fn it_grid(&self) -> (usize, usize) {
        let f = |n| conv_out(conv_out(conv_out(n, 3, 2, 1), 3, 2, 1), 3, 2, 1);
        let (h, w) = self.v1_grid();
        (f(h), f(w))
    }

    pub fn es_grid(&self) -> (usize, usize) {
        let f = |n| conv_out(conv_out(n, 3, 2, 1), 3, 2, 1);
        let (h, w) = self.v1_grid();
        (f(h), f(w))
    }

    fn block(&self, i: usize, steps: usize) -> CorBlockConfig {
        CorBlockConfig { in_ch: self.widths[i], out_ch: self.widths[i + 1], bottleneck: self.widths[i + 1] / self.bottleneck_div, steps }
    }
}

/// Graph handles of one forward pass.
pub struct ForwardOut {
    /// `(B, 2)` actions: steer, accel.
    pub action: Var,
    pub v1: Var,
    pub v2: Var,
    pub v4: Var,
    /// Appearance embedding E_V.
    pub it: Var,
    pub dorsal: Option<DorsalOut>,
    pub vpc_tokens: Var,
    pub dpc_tokens: Option<Var>,
    pub en: Option<Var>,
    pub latent: Var,
    /// Attention weights of every encoder layer in VPC, DPC and MPC order.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BidModel {
    pub cfg: ModelConfig,
}

impl BidModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate().map_err(TensorError::Config)?;
        Ok(BidModel { cfg })
    }

    /// Seeded parameter initialization; the same seed yields identical values for any scalar type.
    pub fn init<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        self.try_init(seed).expect("validated config initializes")
    }

    fn try_init<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let c = &self.cfg;
        let v = c.variant;
        let steps = c.steps();
        let d = c.d_model;
        let ff = c.ff_mult * d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        init_v1(&mut p, c.widths[0], &mut rng)?;
        for (i, name) in ["v2", "v4", "it"].iter().enumerate() {
            init_cor_block(&mut p, name, c.block(i, steps[i]), &mut rng)?;
        }
        let (ih, iw) = c.it_grid();
        init_tokenizer(&mut p, "vpc", ih * iw, c.widths[3], d, &mut rng)?;
        for i in 0..c.vpc_layers {
            init_encoder(&mut p, &format!("vpc.enc{i}"), d, ff, &mut rng)?;
        }
        if v.dorsal() {
            init_dorsal(&mut p, c.widths[0], c.dorsal_width, c.filter_k, &mut rng)?;
            init_dpc(&mut p, c.widths[3], c.filter_k, &mut rng)?;
            let (eh, ew) = c.es_grid();
            init_tokenizer(&mut p, "dpc", eh * ew, c.dorsal_width, d, &mut rng)?;
            for i in 0..c.dpc_layers {
                init_encoder(&mut p, &format!("dpc.enc{i}"), d, ff, &mut rng)?;
            }
        }
        if v.command() {
            init_linear(&mut p, "ofc", d, 4, &mut rng)?;
        }
        if v.fusion() {
            for i in 0..c.mpc_layers {
                init_encoder(&mut p, &format!("mpc.enc{i}"), d, ff, &mut rng)?;
            }
        }
        init_cpc(&mut p, d, c.cpc_hidden, &mut rng)?;
        Ok(p)
    }

    /// Forward pass on `(B, 3, H, W)` frames, their predecessors and `(B, 4)` one-hot commands.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, frames: Var, prev: Var, commands: Var) -> Result<ForwardOut> {
        self.forward_with(g, p, frames, prev, commands, true)
    }

    /// As [`BidModel::forward`]; `use_pos = false` drops the VPC positional table.
    pub fn forward_with<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, frames: Var, prev: Var, commands: Var, use_pos: bool) -> Result<ForwardOut> {
        let c = &self.cfg;
        let v = c.variant;
        let s = g.shape(frames).to_vec();
        let want = [s.first().copied().unwrap_or(0), 3, c.input_height, c.input_width];
        if s != want || g.shape(prev) != want {
            return Err(TensorError::Shape { op: "forward", expected: format!("frames {want:?}"), got: format!("{s:?} / {:?}", g.shape(prev)) });
        }
        let b = s[0];
        if g.shape(commands) != [b, 4] {
            return Err(TensorError::Shape { op: "forward", expected: format!("commands [{b}, 4]"), got: format!("{:?}", g.shape(commands)) });
        }
        let steps = c.steps();
        let (v1, v1_prev) = if v.dorsal() {
            let both = g.concat(&[frames, prev], 0)?;
            let out = perception::v1_forward(g, p, both)?.out;
            (g.narrow(out, 0, 0, b)?, Some(g.narrow(out, 0, b, b)?))
        } else {
            (perception::v1_forward(g, p, frames)?.out, None)
        };
        let v2 = perception::cor_block_forward(g, p, "v2", steps[0], v1)?;
        let v4 = perception::cor_block_forward(g, p, "v4", steps[1], v2)?;
        let it = perception::cor_block_forward(g, p, "it", steps[2], v4)?;

        let vpc = decision::vpc_forward(g, p, it, c.vpc_layers, c.heads, use_pos)?;
        let mut attention = vpc.attention.clone();
        let mut groups = vec![vpc.out];
        let mut dorsal = None;
        let mut dpc_tokens = None;
        if let Some(v1_prev) = v1_prev {
            let d = perception::dorsal_forward(g, p, v1, v1_prev, c.filter_k)?;
            let dpc = decision::dpc_forward(g, p, d.es, it, c.filter_k, c.dpc_layers, c.heads)?;
            attention.extend(dpc.branch.attention.iter().copied());
            groups.push(dpc.branch.out);
            dpc_tokens = Some(dpc.branch.tokens);
            dorsal = Some(d);
        }
        let mut en = None;
        if v.command() {
            let e = decision::ofc_encode(g, p, commands)?;
            groups.push(e);
            en = Some(e);
        }
        let latent = if v.fusion() {
            let m = decision::mpc_forward(g, p, &groups, c.mpc_layers, c.heads)?;
            attention.extend(m.attention);
            m.out
        } else {
            vpc.out
        };
        let action = decision::cpc_head(g, p, latent)?;
        Ok(ForwardOut { action, v1, v2, v4, it, dorsal, vpc_tokens: vpc.tokens, dpc_tokens, en, latent, attention })
    }

    /// Inference on one observation; returns `[steer, accel]`.
    pub fn act(&self, params: &ParamStore<f32>, frame: &Tensor<f32>, prev: &Tensor<f32>, command: laneworld::NavCommand) -> Result<[f32; 2]> {
        let (h, w) = (self.cfg.input_height, self.cfg.input_width);
        let mut g = Graph::<f32>::new();
        let p = params.bind(&mut g, false);
        let f = g.constant(frame.clone().reshape(&[1, 3, h, w])?);
        let pv = g.constant(prev.clone().reshape(&[1, 3, h, w])?);
        let oh = command.one_hot().map(|x| x as f32);
        let cmd = g.constant(Tensor::new(vec![1, 4], oh.to_vec())?);
        let out = self.forward(&mut g, &p, f, pv, cmd)?;
        let a = g.value(out.action).data();
        Ok([a[0], a[1]])
    }
}

/// Converts an interleaved RGB8 buffer into a `(3, H, W)` tensor in [0, 1].
pub fn frame_tensor<T: Scalar>(rgb: &[u8], width: usize, height: usize) -> Tensor<T> {
    let hw = width * height;
    let inv = 1.0 / 255.0;
    Tensor::from_fn(&[3, height, width], |i| {
        let (c, pix) = (i / hw, i % hw);
        T::lit(rgb[3 * pix + c] as f64 * inv)
    })
}
