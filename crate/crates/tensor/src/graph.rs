//! Reverse-mode autodiff over a linear tape of tensor ops.
//!
//! Each op appends a node holding its value; `backward` walks the tape in
//! reverse and accumulates gradients into every node that requires one.
//! Inputs are never mutated.

use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::scalar::{gemm, MatView, Scalar};
use crate::tensor::{axis_extents, shape_err, Result, Tensor, TensorError};

/// Layer-norm variance floor.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    Sum(Var),
    MeanAxis { x: Var, outer: usize, len: usize, inner: usize },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, inner: usize, gstride: usize, mean: Vec<T>, rstd: Vec<T> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    MaxPool { x: Var, arg: Vec<usize> },
    AdaptiveAvg { x: Var, planes: usize, h: usize, w: usize, oh: usize, ow: usize },
    LocalFilter { x: Var, f: Var, dims: [usize; 5] },
    LocalResidual { x: Var, f: Var, dims: [usize; 5] },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of tensor operations. One graph per forward/backward pass.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, op_name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBcast(a, b) | Op::MulBcast(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Relu(x) | Op::Tanh(x) | Op::Abs(x) | Op::Sum(x) | Op::Reshape(x) => vec![*x],
            Op::MeanAxis { x, .. } | Op::Softmax { x, .. } | Op::MaxPool { x, .. } | Op::AdaptiveAvg { x, .. } => vec![*x],
            Op::Permute { x, .. } | Op::Narrow { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Bmm { a, b, .. } => vec![*a, *b],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::LocalFilter { x, f, .. } | Op::LocalResidual { x, f, .. } => vec![*x, *f],
            Op::Concat { xs, .. } => xs.clone(),
        }
    }

    /// Adds a leaf. Gradients are accumulated for it only if `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient from the most recent backward pass.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, format!("{:?}", ta.shape()), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), "mul")
    }

    fn bcast(&mut self, x: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (tx, tb) = (self.value(x), self.value(b));
        if !is_suffix(tb.shape(), tx.shape()) {
            return Err(shape_err(name, format!("trailing dims of {:?}", tx.shape()), tb.shape()));
        }
        let bd = tb.data();
        let n = bd.len();
        let data = tx.data().iter().enumerate().map(|(i, &v)| f(v, bd[i % n])).collect();
        Tensor::new(tx.shape().to_vec(), data)
    }

    /// `x + b` where `b`'s shape is a suffix of `x`'s shape.
    pub fn add_bcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let t = self.bcast(x, b, "add_bcast", |u, v| u + v)?;
        self.push(t, Op::AddBcast(x, b), "add_bcast")
    }

    /// `x * b` where `b`'s shape is a suffix of `x`'s shape.
    pub fn mul_bcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let t = self.bcast(x, b, "mul_bcast", |u, v| u * v)?;
        self.push(t, Op::MulBcast(x, b), "mul_bcast")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c), "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(T::zero()));
        self.push(t, Op::Relu(x), "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.tanh());
        self.push(t, Op::Tanh(x), "tanh")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.abs());
        self.push(t, Op::Abs(x), "abs")
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("mean_axis", format!("axis < {}", shape.len()), axis));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let inv = T::lit(1.0 / len as f64);
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s * inv;
                }
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let t = Tensor::new(oshape, out)?;
        self.push(t, Op::MeanAxis { x, outer, len, inner }, "mean_axis")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis < {}", shape.len()), axis));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).fold(T::neg_infinity(), |m, l| m.max(src[at(l)]));
                let mut z = T::zero();
                for l in 0..len {
                    let e = (src[at(l)] - m).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] = out[at(l)] / z;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::Softmax { x, outer, len, inner }, "softmax")
    }

    /// Normalizes over the trailing `norm_dims` axes of each sample, then
    /// applies a per-slice gain and bias. `gain` may be shorter than the
    /// normalized extent; each gain entry covers a contiguous block
    /// (per-channel affine for `(C, H, W)`, per-feature for tokens).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, norm_dims: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if norm_dims == 0 || norm_dims > shape.len() {
            return Err(shape_err("layer_norm", format!("1..={} normalized dims", shape.len()), norm_dims));
        }
        let inner: usize = shape[shape.len() - norm_dims..].iter().product();
        let outer = self.value(x).numel() / inner;
        let glen = self.value(gain).numel();
        if self.shape(gain) != self.shape(bias) || inner % glen != 0 {
            return Err(shape_err(
                "layer_norm",
                format!("gain/bias dividing {inner} normalized elements"),
                (self.shape(gain).to_vec(), self.shape(bias).to_vec()),
            ));
        }
        let gstride = inner / glen;
        let (xs, gs, bs) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let eps = T::lit(NORM_EPS);
        let n = T::lit(inner as f64);
        let mut out = vec![T::zero(); xs.len()];
        let mut means = Vec::with_capacity(outer);
        let mut rstds = Vec::with_capacity(outer);
        for o in 0..outer {
            let row = &xs[o * inner..(o + 1) * inner];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            for (i, (&v, d)) in row.iter().zip(&mut out[o * inner..(o + 1) * inner]).enumerate() {
                *d = (v - mean) * rstd * gs[i / gstride] + bs[i / gstride];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::LayerNorm { x, gain, bias, inner, gstride, mean: means, rstd: rstds }, "layer_norm")
    }

    // ---- linear algebra ----------------------------------------------

    /// `y = x · wᵀ + b` over the last axis of `x`; `w` is `(out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xshape = self.shape(x).to_vec();
        let wshape = self.shape(w).to_vec();
        let fin = *xshape.last().unwrap_or(&0);
        if wshape.len() != 2 || wshape[1] != fin {
            return Err(shape_err("linear", format!("weight (out, {fin})"), wshape));
        }
        let fout = wshape[0];
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(shape_err("linear", format!("bias ({fout})"), self.shape(b)));
            }
        }
        let m = self.value(x).numel() / fin;
        let mut out = vec![T::zero(); m * fout];
        gemm(
            self.value(x).data(),
            MatView::row_major(m, fin),
            self.value(w).data(),
            MatView::row_major(fout, fin).t(),
            &mut out,
            MatView::row_major(m, fout),
            T::zero(),
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(fout) {
                for (o, &bb) in row.iter_mut().zip(bd) {
                    *o += bb;
                }
            }
        }
        let mut oshape = xshape;
        *oshape.last_mut().unwrap() = fout;
        let t = Tensor::new(oshape, out)?;
        self.push(t, Op::Linear { x, w, b }, "linear")
    }

    /// Batched matmul of rank-3 tensors with optional per-operand transposes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", "two rank-3 tensors with equal batch", (sa, sb)));
        }
        let (m, ka) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if ka != kb {
            return Err(shape_err("bmm", format!("inner dim {ka}"), kb));
        }
        let batch = sa[0];
        let av = if ta { MatView::row_major(ka, m).t() } else { MatView::row_major(m, ka) };
        let bv = if tb { MatView::row_major(n, kb).t() } else { MatView::row_major(kb, n) };
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                &ad[i * m * ka..(i + 1) * m * ka],
                av,
                &bd[i * kb * n..(i + 1) * kb * n],
                bv,
                &mut out[i * m * n..(i + 1) * m * n],
                MatView::row_major(m, n),
                T::zero(),
            );
        }
        let t = Tensor::new(vec![batch, m, n], out)?;
        self.push(t, Op::Bmm { a, b, ta, tb }, "bmm")
    }

    // ---- spatial -------------------------------------------------------

    /// Bias-free 2-D convolution on `(N, C, H, W)` with a `(Co, C, k, k)` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 {
            return Err(shape_err("conv2d", "input (N, C, H, W)", sx));
        }
        if sw.len() != 4 || sw[2] != sw[3] {
            return Err(shape_err("conv2d", "square weight (Co, C, k, k)", sw));
        }
        if sw[1] != sx[1] {
            return Err(shape_err("conv2d", format!("weight input channels {}", sx[1]), sw[1]));
        }
        if stride == 0 || sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(shape_err("conv2d", "kernel no larger than padded input, stride >= 1", (sx, sw, stride, pad)));
        }
        let geom = ConvGeom { n: sx[0], c: sx[1], h: sx[2], w: sx[3], co: sw[0], k: sw[2], stride, pad };
        let (ho, wo) = geom.out_hw();
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let t = Tensor::new(vec![geom.n, geom.co, ho, wo], out)?;
        self.push(t, Op::Conv2d { x, w, geom }, "conv2d")
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || stride == 0 || s[2] + 2 * pad < k || s[3] + 2 * pad < k || pad >= k {
            return Err(shape_err("maxpool2d", "(N, C, H, W) at least one window", (s, k, stride, pad)));
        }
        let g = PoolGeom { planes: s[0] * s[1], h: s[2], w: s[3], k, stride, pad };
        let (ho, wo) = g.out_hw();
        let (out, arg) = kernels::maxpool_forward(self.value(x).data(), &g);
        let t = Tensor::new(vec![s[0], s[1], ho, wo], out)?;
        self.push(t, Op::MaxPool { x, arg }, "maxpool2d")
    }

    /// Adaptive average pooling of `(N, C, H, W)` onto an `oh × ow` grid;
    /// replicates cells when the target grid is larger.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || oh == 0 || ow == 0 {
            return Err(shape_err("adaptive_avg_pool2d", "(N, C, H, W) and nonzero grid", (s, oh, ow)));
        }
        let planes = s[0] * s[1];
        let out = kernels::adaptive_avg_forward(self.value(x).data(), planes, s[2], s[3], oh, ow);
        let t = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        self.push(t, Op::AdaptiveAvg { x, planes, h: s[2], w: s[3], oh, ow }, "adaptive_avg_pool2d")
    }

    /// Applies per-location `k×k` filters `(N, k², H, W)` to every channel of `x (N, C, H, W)`.
    pub fn local_filter(&mut self, x: Var, filters: Var, k: usize) -> Result<Var> {
        let (sx, sf) = (self.shape(x).to_vec(), self.shape(filters).to_vec());
        if sx.len() != 4 || k % 2 == 0 || sf != [sx[0], k * k, sx[2], sx[3]] {
            return Err(shape_err(
                "local_filter",
                format!("filters ({}, {}, {}, {}) with odd k", sx.first().unwrap_or(&0), k * k, sx.get(2).unwrap_or(&0), sx.get(3).unwrap_or(&0)),
                sf,
            ));
        }
        let dims = [sx[0], sx[1], sx[2], sx[3], k];
        let out = kernels::local_filter_forward(self.value(x).data(), self.value(filters).data(), sx[0], sx[1], sx[2], sx[3], k);
        let t = Tensor::new(sx, out)?;
        self.push(t, Op::LocalFilter { x, f: filters, dims }, "local_filter")
    }

    /// `x` minus its per-location filtered neighbourhood, computed as
    /// `Σ_t f_t · (x - x_t)` with edge-replicate padding so that locally
    /// constant regions give exactly zero. Filters are `(N, k², H, W)`.
    pub fn local_residual(&mut self, x: Var, filters: Var, k: usize) -> Result<Var> {
        let (sx, sf) = (self.shape(x).to_vec(), self.shape(filters).to_vec());
        if sx.len() != 4 || k % 2 == 0 || sf != [sx[0], k * k, sx[2], sx[3]] {
            return Err(shape_err(
                "local_residual",
                format!("filters ({}, {}, {}, {}) with odd k", sx.first().unwrap_or(&0), k * k, sx.get(2).unwrap_or(&0), sx.get(3).unwrap_or(&0)),
                sf,
            ));
        }
        let dims = [sx[0], sx[1], sx[2], sx[3], k];
        let out = kernels::local_residual_forward(self.value(x).data(), self.value(filters).data(), sx[0], sx[1], sx[2], sx[3], k);
        let t = Tensor::new(sx, out)?;
        self.push(t, Op::LocalResidual { x, f: filters, dims }, "local_residual")
    }

    // ---- layout ----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x), "reshape")
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("permutation of {} axes", shape.len()), perm));
        }
        let (out, oshape) = kernels::permute(self.value(x).data(), &shape, perm);
        let t = Tensor::new(oshape, out)?;
        self.push(t, Op::Permute { x, perm: perm.to_vec() }, "permute")
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| TensorError::Config("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis < {}", first.len()), axis));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", format!("{first:?} except axis {axis}"), s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut oshape = first;
        oshape[axis] = total;
        let t = Tensor::new(oshape, out)?;
        self.push(t, Op::Concat { xs: xs.to_vec(), axis }, "concat")
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err("narrow", format!("range inside axis {axis} of {shape:?}"), start..start + len));
        }
        let (outer, full, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let t = Tensor::new(oshape, out)?;
        self.push(t, Op::Narrow { x, axis, start }, "narrow")
    }

    // ---- backward --------------------------------------------------------

    /// Backpropagates from a single-element output.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).numel() != 1 {
            return Err(shape_err("backward", "single-element output", self.shape(out)));
        }
        let seed = Tensor::ones(self.shape(out));
        self.backward_with(out, seed)
    }

    /// Backpropagates an explicit output cotangent.
    pub fn backward_with(&mut self, out: Var, seed: Tensor<T>) -> Result<()> {
        if seed.shape() != self.shape(out) {
            return Err(shape_err("backward", format!("seed {:?}", self.shape(out)), seed.shape()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (lo, hi) = self.grads.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else { continue };
            backprop_node(&self.nodes, i, g, lo);
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let shape = nodes[v.0].value.shape().to_vec();
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(data) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape, data).expect("gradient shape matches value")),
    }
}

fn bcast_reduce<T: Scalar>(g: &[T], n: usize, f: impl Fn(usize, T) -> T) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for (i, &v) in g.iter().enumerate() {
        out[i % n] += f(i, v);
    }
    out
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    let need = |v: Var| nodes[v.0].requires_grad;
    let gd = g.data();
    let out = nodes[i].value.data();
    let mut acc = |v: Var, d: Vec<T>| accumulate(nodes, grads, v, d);
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(*a, gd.to_vec());
            acc(*b, gd.to_vec());
        }
        Op::Sub(a, b) => {
            acc(*a, gd.to_vec());
            acc(*b, gd.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if need(*a) {
                acc(*a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect());
            }
            if need(*b) {
                acc(*b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect());
            }
        }
        Op::AddBcast(x, b) => {
            acc(*x, gd.to_vec());
            if need(*b) {
                acc(*b, bcast_reduce(gd, val(*b).len(), |_, v| v));
            }
        }
        Op::MulBcast(x, b) => {
            let (xv, bv) = (val(*x), val(*b));
            let n = bv.len();
            if need(*x) {
                acc(*x, gd.iter().enumerate().map(|(i, &g)| g * bv[i % n]).collect());
            }
            if need(*b) {
                acc(*b, bcast_reduce(gd, n, |i, g| g * xv[i]));
            }
        }
        Op::Scale(x, c) => acc(*x, gd.iter().map(|&g| g * *c).collect()),
        Op::Relu(x) => acc(*x, gd.iter().zip(val(*x)).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect()),
        Op::Tanh(x) => acc(*x, gd.iter().zip(out).map(|(&g, &y)| g * (T::one() - y * y)).collect()),
        Op::Abs(x) => acc(
            *x,
            gd.iter()
                .zip(val(*x))
                .map(|(&g, &v)| {
                    if v > T::zero() {
                        g
                    } else if v < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })
                .collect(),
        ),
        Op::Sum(x) => acc(*x, vec![gd[0]; val(*x).len()]),
        Op::MeanAxis { x, outer, len, inner } => {
            let inv = T::lit(1.0 / *len as f64);
            let mut d = vec![T::zero(); outer * len * inner];
            for o in 0..*outer {
                for l in 0..*len {
                    for k in 0..*inner {
                        d[(o * len + l) * inner + k] = gd[o * inner + k] * inv;
                    }
                }
            }
            acc(*x, d);
        }
        Op::Softmax { x, outer, len, inner } => {
            let mut d = vec![T::zero(); gd.len()];
            for o in 0..*outer {
                for k in 0..*inner {
                    let at = |l: usize| (o * len + l) * inner + k;
                    let dot: T = (0..*len).map(|l| gd[at(l)] * out[at(l)]).sum();
                    for l in 0..*len {
                        d[at(l)] = out[at(l)] * (gd[at(l)] - dot);
                    }
                }
            }
            acc(*x, d);
        }
        Op::LayerNorm { x, gain, bias, inner, gstride, mean, rstd } => {
            let (xv, gv) = (val(*x), val(*gain));
            let glen = gv.len();
            let n = T::lit(*inner as f64);
            let mut dx = vec![T::zero(); xv.len()];
            let mut dg = vec![T::zero(); glen];
            let mut db = vec![T::zero(); glen];
            for (o, (&mu, &rs)) in mean.iter().zip(rstd).enumerate() {
                let row = &xv[o * inner..(o + 1) * inner];
                let grow = &gd[o * inner..(o + 1) * inner];
                let mut s1 = T::zero();
                let mut s2 = T::zero();
                for (j, (&v, &gg)) in row.iter().zip(grow).enumerate() {
                    let xhat = (v - mu) * rs;
                    let dxhat = gg * gv[j / gstride];
                    s1 += dxhat;
                    s2 += dxhat * xhat;
                    dg[j / gstride] += gg * xhat;
                    db[j / gstride] += gg;
                }
                let (m1, m2) = (s1 / n, s2 / n);
                for (j, (&v, &gg)) in row.iter().zip(grow).enumerate() {
                    let xhat = (v - mu) * rs;
                    dx[o * inner + j] = rs * (gg * gv[j / gstride] - m1 - xhat * m2);
                }
            }
            acc(*x, dx);
            acc(*gain, dg);
            acc(*bias, db);
        }
        Op::Linear { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let fout = nodes[w.0].value.shape()[0];
            let fin = nodes[w.0].value.shape()[1];
            let m = xv.len() / fin;
            if need(*x) {
                let mut dx = vec![T::zero(); xv.len()];
                gemm(gd, MatView::row_major(m, fout), wv, MatView::row_major(fout, fin), &mut dx, MatView::row_major(m, fin), T::zero());
                acc(*x, dx);
            }
            if need(*w) {
                let mut dw = vec![T::zero(); wv.len()];
                gemm(gd, MatView::row_major(m, fout).t(), xv, MatView::row_major(m, fin), &mut dw, MatView::row_major(fout, fin), T::zero());
                acc(*w, dw);
            }
            if let Some(b) = b {
                if need(*b) {
                    acc(*b, bcast_reduce(gd, fout, |_, v| v));
                }
            }
        }
        Op::Bmm { a, b, ta, tb } => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let batch = sa[0];
            let (m, k) = if *ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
            let n = if *tb { sb[1] } else { sb[2] };
            let (av, bv) = (val(*a), val(*b));
            // views of op(A) (m×k) and op(B) (k×n) inside their storage
            let a_view = if *ta { MatView::row_major(k, m).t() } else { MatView::row_major(m, k) };
            let b_view = if *tb { MatView::row_major(n, k).t() } else { MatView::row_major(k, n) };
            let gview = MatView::row_major(m, n);
            if need(*a) {
                let mut da = vec![T::zero(); av.len()];
                for i in 0..batch {
                    // d op(A) = dC · op(B)ᵀ, written through the storage layout of A
                    gemm(&gd[i * m * n..(i + 1) * m * n], gview, &bv[i * k * n..(i + 1) * k * n], b_view.t(), &mut da[i * m * k..(i + 1) * m * k], a_view, T::zero());
                }
                acc(*a, da);
            }
            if need(*b) {
                let mut db = vec![T::zero(); bv.len()];
                for i in 0..batch {
                    gemm(&av[i * m * k..(i + 1) * m * k], a_view.t(), &gd[i * m * n..(i + 1) * m * n], gview, &mut db[i * k * n..(i + 1) * k * n], b_view, T::zero());
                }
                acc(*b, db);
            }
        }
        Op::Conv2d { x, w, geom } => {
            let (dx, dw) = kernels::conv2d_backward(val(*x), val(*w), gd, geom, need(*x), need(*w));
            if let Some(dx) = dx {
                acc(*x, dx);
            }
            if let Some(dw) = dw {
                acc(*w, dw);
            }
        }
        Op::MaxPool { x, arg } => {
            let mut d = vec![T::zero(); val(*x).len()];
            for (&a, &g) in arg.iter().zip(gd) {
                d[a] += g;
            }
            acc(*x, d);
        }
        Op::AdaptiveAvg { x, planes, h, w, oh, ow } => {
            acc(*x, kernels::adaptive_avg_backward(gd, *planes, *h, *w, *oh, *ow));
        }
        Op::LocalFilter { x, f, dims } => {
            let [n, c, h, w, k] = *dims;
            let (dx, df) = kernels::local_filter_backward(val(*x), val(*f), gd, n, c, h, w, k);
            acc(*x, dx);
            acc(*f, df);
        }
        Op::LocalResidual { x, f, dims } => {
            let [n, c, h, w, k] = *dims;
            let (dx, df) = kernels::local_residual_backward(val(*x), val(*f), gd, n, c, h, w, k);
            acc(*x, dx);
            acc(*f, df);
        }
        Op::Reshape(x) => acc(*x, gd.to_vec()),
        Op::Permute { x, perm } => {
            let (d, _) = kernels::permute(gd, g.shape(), &kernels::inverse_perm(perm));
            acc(*x, d);
        }
        Op::Concat { xs, axis } => {
            let shape = g.shape();
            let (outer, total, inner) = axis_extents(shape, *axis);
            let mut offset = 0;
            for &v in xs {
                let len = nodes[v.0].value.shape()[*axis];
                if need(v) {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        d.extend_from_slice(&gd[(o * total + offset) * inner..(o * total + offset + len) * inner]);
                    }
                    acc(v, d);
                }
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let xshape = nodes[x.0].value.shape();
            let (outer, full, inner) = axis_extents(xshape, *axis);
            let len = g.shape()[*axis];
            let mut d = vec![T::zero(); outer * full * inner];
            for o in 0..outer {
                d[(o * full + start) * inner..(o * full + start + len) * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            acc(*x, d);
        }
    }
}
