//! Sign-split Grad-CAM for the two regression outputs, plus frame overlays.
//!
//! For a positive output the channel weights average the positive part of
//! the gradient; for a negative output they average the positive part of
//! the negated gradient. A zero output takes the positive branch.

use bid_tensor::{Graph, ParamStore, Tensor, TensorError, Var};
use laneworld::NavCommand;
use serde::{Deserialize, Serialize};

use crate::config::CamLayer;
use crate::model::{BidModel, ForwardOut};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Steer,
    Accel,
}

impl Target {
    pub fn index(self) -> usize {
        match self {
            Target::Steer => 0,
            Target::Accel => 1,
        }
    }

    pub fn parse(s: &str) -> Option<Target> {
        match s {
            "steer" => Some(Target::Steer),
            "accel" => Some(Target::Accel),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Positive,
    Negative,
}

pub fn branch_for(output: f64) -> Branch {
    if output < 0.0 {
        Branch::Negative
    } else {
        Branch::Positive
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major values in [0, 1]; the maximum is 1 unless the map is all zero.
    pub values: Vec<f64>,
    pub target: Target,
    pub branch: Branch,
    pub output: f64,
}

impl Heatmap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Grad-CAM from one sample's feature map `(C, h, w)` and the gradient of the
/// target output with respect to it.
pub fn cam_from_gradients(features: &Tensor<f64>, grads: &Tensor<f64>, output: f64, target: Target) -> Result<Heatmap, TensorError> {
    let s = features.shape();
    if s.len() != 3 || grads.shape() != s {
        return Err(TensorError::Shape { op: "grad_cam", expected: "features and gradients (C, h, w)".into(), got: format!("{s:?} / {:?}", grads.shape()) });
    }
    let (c, hw) = (s[0], s[1] * s[2]);
    let branch = branch_for(output);
    let sign = if branch == Branch::Positive { 1.0 } else { -1.0 };
    let mut cam = vec![0.0; hw];
    for ch in 0..c {
        let g = &grads.data()[ch * hw..(ch + 1) * hw];
        let w = g.iter().map(|&v| (sign * v).max(0.0)).sum::<f64>() / hw as f64;
        if w == 0.0 {
            continue;
        }
        for (o, &a) in cam.iter_mut().zip(&features.data()[ch * hw..(ch + 1) * hw]) {
            *o += w * a;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let max = cam.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        cam.iter_mut().for_each(|v| *v /= max);
    }
    Ok(Heatmap { height: s[1], width: s[2], values: cam, target, branch, output })
}

pub fn layer_var(out: &ForwardOut, layer: CamLayer) -> Result<Var, TensorError> {
    match layer {
        CamLayer::It => Ok(out.it),
        CamLayer::V4 => Ok(out.v4),
        CamLayer::Mt => out.dorsal.as_ref().map(|d| d.mt).ok_or_else(|| TensorError::Config("MT layer needs a variant with the dorsal stream".into())),
    }
}

/// Grad-CAM of one observation's steer or accel output at the chosen layer.
pub fn grad_cam(
    model: &BidModel,
    params: &ParamStore<f32>,
    frame: &Tensor<f32>,
    prev: &Tensor<f32>,
    command: NavCommand,
    target: Target,
    layer: CamLayer,
) -> Result<Heatmap, TensorError> {
    let (h, w) = (model.cfg.input_height, model.cfg.input_width);
    let p64: ParamStore<f64> = params.cast();
    let mut g = Graph::<f64>::new();
    let p = p64.bind(&mut g, true);
    let f = g.constant(frame.cast::<f64>().reshape(&[1, 3, h, w])?);
    let pv = g.constant(prev.cast::<f64>().reshape(&[1, 3, h, w])?);
    let cmd = g.constant(Tensor::new(vec![1, 4], command.one_hot().to_vec())?);
    let out = model.forward(&mut g, &p, f, pv, cmd)?;
    let feat = layer_var(&out, layer)?;
    let y = g.narrow(out.action, 1, target.index(), 1)?;
    let y = g.sum(y)?;
    let output = g.value(y).data()[0];
    g.backward(y)?;
    let fs = g.shape(feat).to_vec();
    let chw = [fs[1], fs[2], fs[3]];
    let features = g.value(feat).clone().reshape(&chw)?;
    let grads = match g.grad(feat) {
        Some(t) => t.clone().reshape(&chw)?,
        None => Tensor::zeros(&chw),
    };
    cam_from_gradients(&features, &grads, output, target)
}

/// Bilinear upsampling with align-corners sampling, `(h, w)` → `(height, width)`.
pub fn upsample(map: &Heatmap, height: usize, width: usize) -> Vec<f64> {
    let (h, w) = (map.height, map.width);
    let coord = |i: usize, n: usize, m: usize| if n <= 1 || m <= 1 { 0.0 } else { i as f64 * (m - 1) as f64 / (n - 1) as f64 };
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let fy = coord(y, height, h);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..width {
            let fx = coord(x, width, w);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(w - 1);
            let top = map.at(y0, x0) * (1.0 - tx) + map.at(y0, x1) * tx;
            let bot = map.at(y1, x0) * (1.0 - tx) + map.at(y1, x1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Blue → green → yellow → red ramp.
pub fn heat_color(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let stops = [[0.0, 0.0, 255.0], [0.0, 255.0, 0.0], [255.0, 255.0, 0.0], [255.0, 0.0, 0.0]];
    let t = v * 3.0;
    let i = (t.floor() as usize).min(2);
    let f = t - i as f64;
    std::array::from_fn(|c| stops[i][c] * (1.0 - f) + stops[i + 1][c] * f)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

/// Blends the upsampled heat into the frame with per-pixel strength
/// `alpha · heat`, so zero heat leaves the pixel untouched.
pub fn overlay(map: &Heatmap, frame_rgb: &[u8], width: usize, height: usize, alpha: f64) -> Image {
    let up = upsample(map, height, width);
    let mut rgb = frame_rgb.to_vec();
    for (i, &v) in up.iter().enumerate() {
        let a = alpha * v;
        if a <= 0.0 {
            continue;
        }
        let col = heat_color(v);
        for c in 0..3 {
            let src = frame_rgb[3 * i + c] as f64;
            rgb[3 * i + c] = ((1.0 - a) * src + a * col[c]).round().clamp(0.0, 255.0) as u8;
        }
    }
    Image { width, height, rgb }
}

// 3×5 glyphs, one row per u8 (low three bits, MSB left).
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '-' => [0, 0, 7, 0, 0],
        '.' => [0, 0, 0, 0, 2],
        ':' => [0, 2, 0, 2, 0],
        'A' => [2, 5, 7, 5, 5],
        'B' => [6, 5, 6, 5, 6],
        'C' => [7, 4, 4, 4, 7],
        'D' => [6, 5, 5, 5, 6],
        'E' => [7, 4, 6, 4, 7],
        'F' => [7, 4, 6, 4, 4],
        'G' => [7, 4, 5, 5, 7],
        'H' => [5, 5, 7, 5, 5],
        'I' => [7, 2, 2, 2, 7],
        'K' => [5, 5, 6, 5, 5],
        'L' => [4, 4, 4, 4, 7],
        'M' => [5, 7, 7, 5, 5],
        'N' => [6, 5, 5, 5, 5],
        'O' => [7, 5, 5, 5, 7],
        'P' => [7, 5, 7, 4, 4],
        'R' => [6, 5, 6, 5, 5],
        'S' => [7, 4, 7, 1, 7],
        'T' => [7, 2, 2, 2, 2],
        'U' => [5, 5, 5, 5, 7],
        'W' => [5, 5, 7, 7, 5],
        'Y' => [5, 5, 2, 2, 2],
        _ => [0; 5],
    }
}

/// Appends a caption strip under the image with the command and action values.
pub fn annotate(img: &Image, command: NavCommand, steer: f64, accel: f64) -> Image {
    let lines = [format!("CMD {}", command.name()), format!("STEER {steer:.3}"), format!("ACCEL {accel:.3}")];
    let strip = 2 + lines.len() * 7;
    let (w, h) = (img.width, img.height + strip);
    let mut rgb = img.rgb.clone();
    rgb.resize(w * h * 3, 0);
    for (li, line) in lines.iter().enumerate() {
        let y0 = img.height + 2 + li * 7;
        for (ci, ch) in line.chars().enumerate() {
            let x0 = 1 + ci * 4;
            for (r, bits) in glyph(ch).iter().enumerate() {
                for b in 0..3 {
                    let (x, y) = (x0 + b, y0 + r);
                    if bits >> (2 - b) & 1 == 1 && x < w {
                        rgb[3 * (y * w + x)..3 * (y * w + x) + 3].copy_from_slice(&[255, 255, 255]);
                    }
                }
            }
        }
    }
    Image { width: w, height: h, rgb }
}

pub fn encode_png(img: &Image) -> Vec<u8> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&img.rgb, img.width as u32, img.height as u32, image::ExtendedColorType::Rgb8)
        .expect("in-memory PNG encoding");
    out
}

/// Threshold at or above which the top `fraction` of values lie.
pub fn top_quantile(values: &[f64], fraction: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let k = ((v.len() as f64 * fraction).ceil() as usize).clamp(1, v.len());
    v[k - 1]
}
