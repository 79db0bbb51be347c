//! Raw NCHW kernels behind the graph ops. All buffers are row-major.

use crate::scalar::{gemm, MatView, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let k = g.k;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let k = g.k;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let ckk = g.c * g.k * g.k;
    let npix = ho * wo;
    let mut out = vec![T::zero(); g.n * g.co * npix];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * npix] };
    for n in 0..g.n {
        let xs = &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        gemm(
            w,
            MatView::row_major(g.co, ckk),
            src,
            MatView::row_major(ckk, npix),
            &mut out[n * g.co * npix..(n + 1) * g.co * npix],
            MatView::row_major(g.co, npix),
            T::zero(),
        );
    }
    out
}

/// Returns (dx, dw); either may be skipped.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (ho, wo) = g.out_hw();
    let ckk = g.c * g.k * g.k;
    let npix = ho * wo;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut cols = vec![T::zero(); ckk * npix];
    for n in 0..g.n {
        let xs = &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        let dy = &dout[n * g.co * npix..(n + 1) * g.co * npix];
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            gemm(
                dy,
                MatView::row_major(g.co, npix),
                src,
                MatView::row_major(ckk, npix).t(),
                dw,
                MatView::row_major(g.co, ckk),
                T::one(),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
            if g.is_pointwise() {
                gemm(w, MatView::row_major(g.co, ckk).t(), dy, MatView::row_major(g.co, npix), dxs, MatView::row_major(ckk, npix), T::zero());
            } else {
                gemm(w, MatView::row_major(g.co, ckk).t(), dy, MatView::row_major(g.co, npix), &mut cols, MatView::row_major(ckk, npix), T::zero());
                col2im(&cols, g, dxs);
            }
        }
    }
    (dx, dw)
}

#[derive(Clone, Copy, Debug)]
pub struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }
}

/// Max pool; returns output and the flat input index chosen for each output.
pub fn maxpool_forward<T: Scalar>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = g.out_hw();
    let mut out = Vec::with_capacity(g.planes * ho * wo);
    let mut arg = Vec::with_capacity(g.planes * ho * wo);
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut bi = usize::MAX;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * g.w + ix as usize;
                        if x[idx] > best || bi == usize::MAX {
                            best = x[idx];
                            bi = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(bi);
            }
        }
    }
    (out, arg)
}

/// Bin boundaries for adaptive pooling of `n` cells onto `m` bins.
pub fn adaptive_bin(i: usize, n: usize, m: usize) -> (usize, usize) {
    let start = (i * n) / m;
    let end = ((i + 1) * n).div_ceil(m);
    (start, end.max(start + 1))
}

pub fn adaptive_avg_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, w, ow);
                let mut s = T::zero();
                for y in y0..y1 {
                    for xx in x0..x1 {
                        s += plane[y * w + xx];
                    }
                }
                out.push(s / T::lit(((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    out
}

pub fn adaptive_avg_backward<T: Scalar>(dout: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, w, ow);
                let g = dout[(p * oh + oy) * ow + ox] / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                for y in y0..y1 {
                    for xx in x0..x1 {
                        dx[p * h * w + y * w + xx] += g;
                    }
                }
            }
        }
    }
    dx
}

/// Per-location filtering: `out[n,c,y,x] = Σ_t f[n,t,y,x] · x[n,c,y+dy_t,x+dx_t]`
/// with `t` running over a `k×k` window centred on `(y,x)` and zero padding.
pub fn local_filter_forward<T: Scalar>(x: &[T], f: &[T], n: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let r = (k / 2) as isize;
    let hw = h * w;
    let mut out = vec![T::zero(); n * c * hw];
    for b in 0..n {
        for t in 0..k * k {
            let dy = (t / k) as isize - r;
            let dx = (t % k) as isize - r;
            let fp = &f[(b * k * k + t) * hw..(b * k * k + t + 1) * hw];
            for ch in 0..c {
                let xp = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                let op = &mut out[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        op[y * w + xx] += fp[y * w + xx] * xp[sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn local_filter_backward<T: Scalar>(
    x: &[T],
    f: &[T],
    dout: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
) -> (Vec<T>, Vec<T>) {
    let r = (k / 2) as isize;
    let hw = h * w;
    let mut dxv = vec![T::zero(); x.len()];
    let mut df = vec![T::zero(); f.len()];
    for b in 0..n {
        for t in 0..k * k {
            let dy = (t / k) as isize - r;
            let dx = (t % k) as isize - r;
            let fo = (b * k * k + t) * hw;
            for ch in 0..c {
                let xo = (b * c + ch) * hw;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let g = dout[xo + y * w + xx];
                        let si = xo + sy as usize * w + sx as usize;
                        df[fo + y * w + xx] += g * x[si];
                        dxv[si] += g * f[fo + y * w + xx];
                    }
                }
            }
        }
    }
    (dxv, df)
}

/// Motion residual against per-location filters with edge-replicate padding:
/// `out[n,c,y,x] = Σ_t f[n,t,y,x] · (x[n,c,y,x] - x[n,c,y',x'])` where
/// `(y',x')` is the clamped `t`-th neighbour. Zero wherever `x` is locally constant.
pub fn local_residual_forward<T: Scalar>(x: &[T], f: &[T], n: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let r = (k / 2) as isize;
    let hw = h * w;
    let mut out = vec![T::zero(); n * c * hw];
    for b in 0..n {
        for t in 0..k * k {
            let dy = (t / k) as isize - r;
            let dx = (t % k) as isize - r;
            let fp = &f[(b * k * k + t) * hw..(b * k * k + t + 1) * hw];
            for ch in 0..c {
                let xp = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                let op = &mut out[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for y in 0..h {
                    let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for xx in 0..w {
                        let sx = (xx as isize + dx).clamp(0, w as isize - 1) as usize;
                        op[y * w + xx] += fp[y * w + xx] * (xp[y * w + xx] - xp[sy * w + sx]);
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn local_residual_backward<T: Scalar>(
    x: &[T],
    f: &[T],
    dout: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
) -> (Vec<T>, Vec<T>) {
    let r = (k / 2) as isize;
    let hw = h * w;
    let mut dxv = vec![T::zero(); x.len()];
    let mut df = vec![T::zero(); f.len()];
    for b in 0..n {
        for t in 0..k * k {
            let dy = (t / k) as isize - r;
            let dx = (t % k) as isize - r;
            let fo = (b * k * k + t) * hw;
            for ch in 0..c {
                let xo = (b * c + ch) * hw;
                for y in 0..h {
                    let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for xx in 0..w {
                        let sx = (xx as isize + dx).clamp(0, w as isize - 1) as usize;
                        let g = dout[xo + y * w + xx];
                        let (ci, si) = (xo + y * w + xx, xo + sy * w + sx);
                        let fv = f[fo + y * w + xx];
                        df[fo + y * w + xx] += g * (x[ci] - x[si]);
                        dxv[ci] += g * fv;
                        dxv[si] -= g * fv;
                    }
                }
            }
        }
    }
    (dxv, df)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Generic axis permutation; `out.shape[i] = shape[perm[i]]`.
pub fn permute<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..x.len() {
        out.push(x[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_bins_cover_input() {
        for n in 1..8 {
            for m in 1..8 {
                let mut covered = vec![false; n];
                for i in 0..m {
                    let (a, b) = adaptive_bin(i, n, m);
                    assert!(a < b && b <= n);
                    covered[a..b].iter_mut().for_each(|c| *c = true);
                }
                assert!(covered.iter().all(|&c| c));
            }
        }
    }

    #[test]
    fn permute_roundtrip() {
        let x: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let (y, s) = permute(&x, &[2, 3, 4], &[2, 0, 1]);
        assert_eq!(s, vec![4, 2, 3]);
        // y[k, i, j] = x[i, j, k]
        assert_eq!(y[(1 * 2 + 1) * 3 + 2], x[(1 * 3 + 2) * 4 + 1]);
        let (z, s2) = permute(&y, &s, &inverse_perm(&[2, 0, 1]));
        assert_eq!(s2, vec![2, 3, 4]);
        assert_eq!(z, x);
    }
}
