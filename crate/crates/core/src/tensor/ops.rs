//! Forward kernels. Every kernel is a pure function of its inputs; the
//! reductions run in a fixed index order so results are bit-reproducible.
//!
//! The `*_backward` helpers are the adjoints used by the tape. They do not
//! feed the MAC counter.

use super::{macs, Element, Shape, Tensor};
use crate::error::{config_err, dim_err, Result};

/// Spatial padding mode for [`conv2d`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Padding {
    /// Zero-pad `(k - 1) / 2` on every side.
    Same,
    Valid,
}

impl Padding {
    fn amount(self, k: usize) -> usize {
        match self {
            Padding::Same => (k - 1) / 2,
            Padding::Valid => 0,
        }
    }
}

/// `out (m×p) += op(a) · op(b)`, with `op` an optional transpose.
///
/// `a` is stored `m×k` (or `k×m` when `ta`), `b` is stored `k×p` (or `p×k`
/// when `tb`). Every output element accumulates over `k` in ascending order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    p: usize,
    ta: bool,
    tb: bool,
) {
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let row = &mut out[i * p..(i + 1) * p];
                for kk in 0..k {
                    let av = a[i * k + kk];
                    let brow = &b[kk * p..(kk + 1) * p];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..p {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = T::zero();
                    for (&x, &y) in arow.iter().zip(brow) {
                        acc += x * y;
                    }
                    out[i * p + j] += acc;
                }
            }
        }
        (true, false) => {
            for kk in 0..k {
                let brow = &b[kk * p..(kk + 1) * p];
                for i in 0..m {
                    let av = a[kk * m + i];
                    let row = &mut out[i * p..(i + 1) * p];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..p {
                    let mut acc = T::zero();
                    for kk in 0..k {
                        acc += a[kk * m + i] * b[j * k + kk];
                    }
                    out[i * p + j] += acc;
                }
            }
        }
    }
}

/// Matrix product with `a` viewed as `(n·h·w) × c` and `b` viewed as
/// `(n·h·w) × c`. The inner extents (`a.c` and `b`'s row count) must match.
/// The result keeps `a`'s `(n, h, w)` and takes `b.c` columns.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.shape().rows(), a.shape().c());
    let (kb, p) = (b.shape().rows(), b.shape().c());
    if k != kb {
        return dim_err(format!("matmul inner extents differ: {} vs {}", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * p];
    gemm(a.data(), b.data(), &mut out, m, k, p, false, false);
    macs::record(m * k * p);
    Ok(Tensor::from_raw(a.shape().with_c(p), out))
}

fn bmm_dims(a: Shape, b: Shape, ta: bool, tb: bool) -> Result<(usize, usize, usize, usize)> {
    if a.n() != b.n() || a.h() != b.h() {
        return dim_err(format!("batched matmul batch mismatch: {a} vs {b}"));
    }
    let (m, k) = if ta { (a.c(), a.w()) } else { (a.w(), a.c()) };
    let (kb, p) = if tb { (b.c(), b.w()) } else { (b.w(), b.c()) };
    if k != kb {
        return dim_err(format!("batched matmul inner mismatch: {a} vs {b}"));
    }
    Ok((a.n() * a.h(), m, k, p))
}

/// Batched product over the `(n, h)` axes of `(w × c)` matrices, with
/// optional transposes.
pub fn batched_matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    let out = bmm_raw(a, b, ta, tb)?;
    let (batch, m, k, p) = bmm_dims(a.shape(), b.shape(), ta, tb)?;
    macs::record(batch * m * k * p);
    Ok(out)
}

pub(crate) fn bmm_raw<T: Element>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    let (batch, m, k, p) = bmm_dims(a.shape(), b.shape(), ta, tb)?;
    let mut out = vec![T::zero(); batch * m * p];
    let (sa, sb) = (m * k, k * p);
    for i in 0..batch {
        gemm(
            &a.data()[i * sa..(i + 1) * sa],
            &b.data()[i * sb..(i + 1) * sb],
            &mut out[i * m * p..(i + 1) * m * p],
            m,
            k,
            p,
            ta,
            tb,
        );
    }
    Ok(Tensor::from_raw(Shape::new(a.shape().n(), a.shape().h(), m, p), out))
}

/// Geometry of one convolution call, shared by the forward kernel, its
/// adjoint and the analytic cost model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        h: usize,
        w: usize,
        c_in: usize,
        kernel: (usize, usize),
        c_out: usize,
        stride: usize,
        groups: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        if groups == 0 || !c_in.is_multiple_of(groups) || !c_out.is_multiple_of(groups) {
            return config_err(format!("conv2d: channels {c_in}->{c_out} not divisible by groups {groups}"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return config_err(format!("conv2d: kernel {kh}x{kw} must be odd"));
        }
        if stride == 0 {
            return config_err("conv2d: stride must be >= 1");
        }
        let pad = padding.amount(kh.max(kw));
        if kh != kw && padding == Padding::Same {
            return config_err("conv2d: same padding needs a square kernel");
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        if hp < kh || wp < kw {
            return dim_err(format!("conv2d: input {h}x{w} smaller than kernel"));
        }
        Ok(ConvGeometry {
            kh,
            kw,
            c_in,
            c_out,
            groups,
            stride,
            pad,
            out_h: (hp - kh) / stride + 1,
            out_w: (wp - kw) / stride + 1,
        })
    }

    /// Multiply-accumulates for one image: `kh·kw·(c_in/groups)·c_out·h_out·w_out`.
    pub fn macs(&self) -> usize {
        self.kh * self.kw * (self.c_in / self.groups) * self.c_out * self.out_h * self.out_w
    }
}

fn conv_geometry<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    groups: usize,
    padding: Padding,
) -> Result<ConvGeometry> {
    let [kh, kw, cin_g, c_out] = weight.shape().0;
    let c_in = x.shape().c();
    if groups == 0 || cin_g * groups != c_in {
        return config_err(format!(
            "conv2d: weight {} does not fit {} input channels in {groups} groups",
            weight.shape(),
            c_in
        ));
    }
    ConvGeometry::new(x.shape().h(), x.shape().w(), c_in, (kh, kw), c_out, stride, groups, padding)
}

/// 2-D cross-correlation. `weight` is `(kh, kw, c_in/groups, c_out)`, `bias`
/// is `(1, 1, 1, c_out)`. `groups = c_in` gives a depth-wise conv (with a
/// channel multiplier when `c_out > c_in`).
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    groups: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = conv_geometry(x, weight, stride, groups, padding)?;
    if let Some(b) = bias {
        if b.numel() != g.c_out {
            return dim_err(format!("conv2d: bias {} for {} outputs", b.shape(), g.c_out));
        }
    }
    let n = x.shape().n();
    let xp = pad_symmetric(x, g.pad);
    let (hp, wp) = (xp.shape().h(), xp.shape().w());
    let (cin_g, cout_g) = (g.c_in / groups, g.c_out / groups);
    let mut out = vec![T::zero(); n * g.out_h * g.out_w * g.c_out];
    let wdata = weight.data();
    let xd = xp.data();
    for b in 0..n {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o0 = ((b * g.out_h + oy) * g.out_w + ox) * g.c_out;
                let orow = &mut out[o0..o0 + g.c_out];
                if let Some(bias) = bias {
                    orow.copy_from_slice(bias.data());
                }
                for ky in 0..g.kh {
                    let iy = oy * g.stride + ky;
                    for kx in 0..g.kw {
                        let ix = ox * g.stride + kx;
                        let x0 = ((b * hp + iy) * wp + ix) * g.c_in;
                        let xrow = &xd[x0..x0 + g.c_in];
                        let wk = &wdata[(ky * g.kw + kx) * cin_g * g.c_out..][..cin_g * g.c_out];
                        conv_tap(orow, xrow, wk, groups, cin_g, cout_g);
                    }
                }
            }
        }
    }
    macs::record(n * g.macs());
    Ok(Tensor::from_raw(Shape::new(n, g.out_h, g.out_w, g.c_out), out))
}

#[inline]
fn conv_tap<T: Element>(orow: &mut [T], xrow: &[T], wk: &[T], groups: usize, cin_g: usize, cout_g: usize) {
    let c_out = orow.len();
    if groups == 1 {
        for (ci, &xv) in xrow.iter().enumerate() {
            for (o, &wv) in orow.iter_mut().zip(&wk[ci * c_out..(ci + 1) * c_out]) {
                *o += xv * wv;
            }
        }
    } else if cin_g == 1 && cout_g == 1 {
        for ((o, &xv), &wv) in orow.iter_mut().zip(xrow).zip(wk) {
            *o += xv * wv;
        }
    } else {
        for gi in 0..groups {
            for ci in 0..cin_g {
                let xv = xrow[gi * cin_g + ci];
                let base = ci * c_out + gi * cout_g;
                for co in 0..cout_g {
                    orow[gi * cout_g + co] += xv * wk[base + co];
                }
            }
        }
    }
}

/// Adjoint of [`conv2d`]: returns `(grad_x, grad_weight, grad_bias)`.
pub(crate) fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    groups: usize,
    padding: Padding,
    need_x: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let g = conv_geometry(x, weight, stride, groups, padding)?;
    let n = x.shape().n();
    let xp = pad_symmetric(x, g.pad);
    let (hp, wp) = (xp.shape().h(), xp.shape().w());
    let (cin_g, cout_g) = (g.c_in / groups, g.c_out / groups);
    let mut gxp = if need_x { vec![T::zero(); xp.numel()] } else { Vec::new() };
    let mut gw = vec![T::zero(); weight.numel()];
    let mut gb = vec![T::zero(); g.c_out];
    let (xd, wd, gd) = (xp.data(), weight.data(), gout.data());
    for b in 0..n {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o0 = ((b * g.out_h + oy) * g.out_w + ox) * g.c_out;
                let grow = &gd[o0..o0 + g.c_out];
                for (acc, &gv) in gb.iter_mut().zip(grow) {
                    *acc += gv;
                }
                for ky in 0..g.kh {
                    let iy = oy * g.stride + ky;
                    for kx in 0..g.kw {
                        let ix = ox * g.stride + kx;
                        let x0 = ((b * hp + iy) * wp + ix) * g.c_in;
                        let wbase = (ky * g.kw + kx) * cin_g * g.c_out;
                        for gi in 0..groups {
                            for ci in 0..cin_g {
                                let c = gi * cin_g + ci;
                                let xv = xd[x0 + c];
                                let wrow = wbase + ci * g.c_out + gi * cout_g;
                                let mut gx_acc = T::zero();
                                for co in 0..cout_g {
                                    let gv = grow[gi * cout_g + co];
                                    gw[wrow + co] += xv * gv;
                                    gx_acc += wd[wrow + co] * gv;
                                }
                                if need_x {
                                    gxp[x0 + c] += gx_acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let gx = if need_x {
        let gxp = Tensor::from_raw(xp.shape(), gxp);
        Some(crop_offset(&gxp, g.pad, g.pad, x.shape().h(), x.shape().w()))
    } else {
        None
    };
    Ok((gx, Tensor::from_raw(weight.shape(), gw), Tensor::from_raw(Shape::new(1, 1, 1, g.c_out), gb)))
}

fn pad_symmetric<T: Element>(x: &Tensor<T>, p: usize) -> Tensor<T> {
    if p == 0 {
        return x.clone();
    }
    let [n, h, w, c] = x.shape().0;
    let s = Shape::new(n, h + 2 * p, w + 2 * p, c);
    let mut out = vec![T::zero(); s.numel()];
    for b in 0..n {
        for y in 0..h {
            let src = x.shape().offset(b, y, 0, 0);
            let dst = s.offset(b, y + p, p, 0);
            out[dst..dst + w * c].copy_from_slice(&x.data()[src..src + w * c]);
        }
    }
    Tensor::from_raw(s, out)
}

fn crop_offset<T: Element>(x: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Tensor<T> {
    let [n, _, _, c] = x.shape().0;
    let s = Shape::new(n, h, w, c);
    let mut out = Vec::with_capacity(s.numel());
    for b in 0..n {
        for y in 0..h {
            let src = x.shape().offset(b, y + top, left, 0);
            out.extend_from_slice(&x.data()[src..src + w * c]);
        }
    }
    Tensor::from_raw(s, out)
}

/// Numerically stable softmax over the channel (last) axis.
pub fn softmax<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.shape().c();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    macs::record(x.numel());
    Tensor::from_raw(x.shape(), out)
}

pub(crate) fn softmax_backward<T: Element>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let c = y.shape().c();
    let mut out = vec![T::zero(); y.numel()];
    for ((orow, yrow), grow) in out.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
        let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &gv) in orow.iter_mut().zip(yrow).zip(grow) {
            *o = yv * (gv - dot);
        }
    }
    Tensor::from_raw(y.shape(), out)
}

/// Per-position statistics kept by [`layer_norm_with_stats`] for the adjoint.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Layer norm over the channel axis only, then a per-channel affine map.
pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    layer_norm_with_stats(x, gamma, beta, eps).map(|(y, _)| y)
}

pub fn layer_norm_with_stats<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let c = x.shape().c();
    if gamma.numel() != c || beta.numel() != c {
        return dim_err(format!("layer_norm: affine {} / {} for {c} channels", gamma.shape(), beta.shape()));
    }
    let rows = x.shape().rows();
    let cn = T::from_f64(c as f64);
    let eps = T::from_f64(eps);
    let mut out = vec![T::zero(); x.numel()];
    let mut stats = NormStats { mean: Vec::with_capacity(rows), rstd: Vec::with_capacity(rows) };
    for (orow, xrow) in out.chunks_mut(c).zip(x.data().chunks(c)) {
        let mean = xrow.iter().copied().sum::<T>() / cn;
        let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
        let rstd = T::one() / (var + eps).sqrt();
        for (i, (o, &v)) in orow.iter_mut().zip(xrow).enumerate() {
            *o = (v - mean) * rstd * gamma.data()[i] + beta.data()[i];
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    macs::record(x.numel());
    Ok((Tensor::from_raw(x.shape(), out), stats))
}

/// Adjoint of [`layer_norm`]: `(grad_x, grad_gamma, grad_beta)`.
pub(crate) fn layer_norm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = x.shape().c();
    let cn = T::from_f64(c as f64);
    let mut gx = vec![T::zero(); x.numel()];
    let mut gg = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    let mut xhat = vec![T::zero(); c];
    let mut gxhat = vec![T::zero(); c];
    for (r, ((gxrow, xrow), grow)) in
        gx.chunks_mut(c).zip(x.data().chunks(c)).zip(g.data().chunks(c)).enumerate()
    {
        let (mean, rstd) = (stats.mean[r], stats.rstd[r]);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for i in 0..c {
            xhat[i] = (xrow[i] - mean) * rstd;
            gxhat[i] = grow[i] * gamma.data()[i];
            gg[i] += grow[i] * xhat[i];
            gbeta[i] += grow[i];
            sum_g += gxhat[i];
            sum_gx += gxhat[i] * xhat[i];
        }
        let (mg, mgx) = (sum_g / cn, sum_gx / cn);
        for i in 0..c {
            gxrow[i] = rstd * (gxhat[i] - mg - xhat[i] * mgx);
        }
    }
    let cs = Shape::new(1, 1, 1, c);
    (Tensor::from_raw(x.shape(), gx), Tensor::from_raw(cs, gg), Tensor::from_raw(cs, gbeta))
}

/// Exact (erf-based) GELU.
pub fn gelu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    macs::record(x.numel());
    x.map(|v| half * v * (T::one() + (v * inv_sqrt2).erf()))
}

pub(crate) fn gelu_backward<T: Element>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &gv)| {
            let cdf = half * (T::one() + (v * inv_sqrt2).erf());
            let pdf = (-half * v * v).exp() * inv_sqrt2pi;
            gv * (cdf + v * pdf)
        })
        .collect();
    Tensor::from_raw(x.shape(), data)
}

/// Interpolation taps along one axis for a ×2 half-pixel upsample:
/// `(lo, hi, weight_lo, weight_hi)` per output index.
fn upsample_taps(len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            let t = src - lo as f64;
            (lo, hi, 1.0 - t, t)
        })
        .collect()
}

/// Bilinear ×2 upsample with half-pixel centres (`align_corners = false`).
pub fn bilinear_upsample_x2<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let [n, h, w, c] = x.shape().0;
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let s = Shape::new(n, 2 * h, 2 * w, c);
    let mut out = vec![T::zero(); s.numel()];
    let xd = x.data();
    for b in 0..n {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let taps = [
                    (y0, x0, T::from_f64(wy0 * wx0)),
                    (y0, x1, T::from_f64(wy0 * wx1)),
                    (y1, x0, T::from_f64(wy1 * wx0)),
                    (y1, x1, T::from_f64(wy1 * wx1)),
                ];
                let o = s.offset(b, oy, ox, 0);
                let orow = &mut out[o..o + c];
                for (iy, ix, wt) in taps {
                    let i = x.shape().offset(b, iy, ix, 0);
                    for (ov, &xv) in orow.iter_mut().zip(&xd[i..i + c]) {
                        *ov += wt * xv;
                    }
                }
            }
        }
    }
    Tensor::from_raw(s, out)
}

pub(crate) fn bilinear_upsample_x2_backward<T: Element>(in_shape: Shape, g: &Tensor<T>) -> Tensor<T> {
    let [n, h, w, c] = in_shape.0;
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let mut out = vec![T::zero(); in_shape.numel()];
    let gs = g.shape();
    for b in 0..n {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let taps = [
                    (y0, x0, T::from_f64(wy0 * wx0)),
                    (y0, x1, T::from_f64(wy0 * wx1)),
                    (y1, x0, T::from_f64(wy1 * wx0)),
                    (y1, x1, T::from_f64(wy1 * wx1)),
                ];
                let o = gs.offset(b, oy, ox, 0);
                let grow = &g.data()[o..o + c];
                for (iy, ix, wt) in taps {
                    let i = in_shape.offset(b, iy, ix, 0);
                    for (acc, &gv) in out[i..i + c].iter_mut().zip(grow) {
                        *acc += wt * gv;
                    }
                }
            }
        }
    }
    Tensor::from_raw(in_shape, out)
}

/// Zero-pads bottom and right up to `to_h × to_w`.
pub fn pad_spatial<T: Element>(x: &Tensor<T>, to_h: usize, to_w: usize) -> Result<Tensor<T>> {
    let [n, h, w, c] = x.shape().0;
    if to_h < h || to_w < w {
        return dim_err(format!("pad_spatial cannot shrink {h}x{w} to {to_h}x{to_w}"));
    }
    if (to_h, to_w) == (h, w) {
        return Ok(x.clone());
    }
    let s = Shape::new(n, to_h, to_w, c);
    let mut out = vec![T::zero(); s.numel()];
    for b in 0..n {
        for y in 0..h {
            let src = x.shape().offset(b, y, 0, 0);
            let dst = s.offset(b, y, 0, 0);
            out[dst..dst + w * c].copy_from_slice(&x.data()[src..src + w * c]);
        }
    }
    Ok(Tensor::from_raw(s, out))
}

/// Keeps the top-left `h × w` region. Inverse of [`pad_spatial`].
pub fn crop_spatial<T: Element>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    if h == 0 || w == 0 || h > x.shape().h() || w > x.shape().w() {
        return dim_err(format!("crop_spatial {h}x{w} out of {}", x.shape()));
    }
    Ok(crop_offset(x, 0, 0, h, w))
}

/// Channel concatenation in argument order.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = parts.first() else {
        return dim_err("concat of zero tensors");
    };
    let rows = first.shape().rows();
    for p in parts {
        if p.shape().rows() != rows
            || p.shape().n() != first.shape().n()
            || p.shape().h() != first.shape().h()
        {
            return dim_err(format!("concat spatial mismatch: {} vs {}", p.shape(), first.shape()));
        }
    }
    let c: usize = parts.iter().map(|p| p.shape().c()).sum();
    let mut out = Vec::with_capacity(rows * c);
    for r in 0..rows {
        for p in parts {
            let pc = p.shape().c();
            out.extend_from_slice(&p.data()[r * pc..(r + 1) * pc]);
        }
    }
    Ok(Tensor::from_raw(first.shape().with_c(c), out))
}

/// Channels `[start, start + len)`.
pub fn slice_channels<T: Element>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let c = x.shape().c();
    if len == 0 || start + len > c {
        return dim_err(format!("slice [{start}, {}) of {c} channels", start + len));
    }
    let mut out = Vec::with_capacity(x.shape().rows() * len);
    for row in x.data().chunks(c) {
        out.extend_from_slice(&row[start..start + len]);
    }
    Ok(Tensor::from_raw(x.shape().with_c(len), out))
}

/// Sentinel in [`IndexMap::src`] meaning "write zero".
pub const ZERO_SLOT: usize = usize::MAX;

/// Pure re-indexing: output element `i` takes input element `src[i]`, or zero
/// when `src[i] == ZERO_SLOT`. Padding, cropping, window and axial
/// rearrangements and head splitting are all expressed this way.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMap {
    pub in_shape: Shape,
    pub out_shape: Shape,
    pub src: Vec<usize>,
}

impl IndexMap {
    /// Builds a map by asking `f` for the source coordinate of every output
    /// coordinate.
    pub fn build(
        in_shape: Shape,
        out_shape: Shape,
        mut f: impl FnMut([usize; 4]) -> Option<[usize; 4]>,
    ) -> Self {
        let [n, h, w, c] = out_shape.0;
        let mut src = Vec::with_capacity(out_shape.numel());
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for k in 0..c {
                        src.push(match f([b, y, x, k]) {
                            Some([sb, sy, sx, sk]) => in_shape.offset(sb, sy, sx, sk),
                            None => ZERO_SLOT,
                        });
                    }
                }
            }
        }
        IndexMap { in_shape, out_shape, src }
    }

    /// Moves axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(in_shape: Shape, perm: [usize; 4]) -> Self {
        let out = Shape(perm.map(|p| in_shape.0[p]));
        Self::build(in_shape, out, |o| {
            let mut i = [0; 4];
            for (axis, &p) in perm.iter().enumerate() {
                i[p] = o[axis];
            }
            Some(i)
        })
    }
}

pub fn gather<T: Element>(x: &Tensor<T>, map: &IndexMap) -> Result<Tensor<T>> {
    if x.shape() != map.in_shape {
        return dim_err(format!("gather expects {} input, got {}", map.in_shape, x.shape()));
    }
    let xd = x.data();
    let data = map.src.iter().map(|&i| if i == ZERO_SLOT { T::zero() } else { xd[i] }).collect();
    Ok(Tensor::from_raw(map.out_shape, data))
}

pub(crate) fn scatter_add<T: Element>(g: &Tensor<T>, map: &IndexMap) -> Tensor<T> {
    let mut out = vec![T::zero(); map.in_shape.numel()];
    for (&i, &gv) in map.src.iter().zip(g.data()) {
        if i != ZERO_SLOT {
            out[i] += gv;
        }
    }
    Tensor::from_raw(map.in_shape, out)
}

fn same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("{op}: {} vs {}", a.shape(), b.shape()));
    }
    Ok(())
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_raw(a.shape(), data))
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Ok(Tensor::from_raw(a.shape(), data))
}

pub fn scale<T: Element>(x: &Tensor<T>, s: f64) -> Tensor<T> {
    let s = T::from_f64(s);
    x.map(|v| v * s)
}

/// Adds a `(1, 1, 1, c)` bias to every position.
pub fn add_bias<T: Element>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x.shape().c();
    if bias.numel() != c {
        return dim_err(format!("bias {} for {c} channels", bias.shape()));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(Tensor::from_raw(x.shape(), out))
}

/// Global average pool: `(n, h, w, c) -> (n, 1, 1, c)`.
pub fn mean_spatial<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let [n, h, w, c] = x.shape().0;
    let hw = h * w;
    let inv = T::from_f64(1.0 / hw as f64);
    let mut out = vec![T::zero(); n * c];
    for b in 0..n {
        let orow = &mut out[b * c..(b + 1) * c];
        for row in x.data()[b * hw * c..(b + 1) * hw * c].chunks(c) {
            for (o, &v) in orow.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
    Tensor::from_raw(Shape::new(n, 1, 1, c), out)
}

/// Mean cross-entropy of `(n, 1, 1, k)` logits against class labels.
/// Returns the loss and the softmax probabilities.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let [n, h, w, k] = logits.shape().0;
    if h != 1 || w != 1 || labels.len() != n {
        return dim_err(format!("cross_entropy: logits {} for {} labels", logits.shape(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return config_err(format!("label {bad} out of range for {k} classes"));
    }
    let mut probs = logits.data().to_vec();
    let mut loss = T::zero();
    for (row, &label) in probs.chunks_mut(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        loss += lse - row[label];
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    Ok((loss / T::from_f64(n as f64), Tensor::from_raw(logits.shape(), probs)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn t64(shape: [usize; 4], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_sum() {
        let eye = Tensor::<f64>::from_fn([1, 1, 3, 3], |[_, _, i, j]| (i == j) as u8 as f64);
        let mut rng = Rng::new(1);
        let b = Tensor::<f64>::randn([1, 1, 3, 4], &mut rng);
        assert_eq!(matmul(&eye, &b).unwrap(), b);

        let ones_row = Tensor::<f64>::ones([1, 1, 1, 6]);
        let ones_col = Tensor::<f64>::ones([1, 1, 6, 1]);
        assert_eq!(matmul(&ones_row, &ones_col).unwrap().item(), 6.0);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let a = Tensor::<f32>::ones([1, 1, 2, 3]);
        let b = Tensor::<f32>::ones([1, 1, 4, 2]);
        assert!(matches!(matmul(&a, &b), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn batched_matmul_transposes_agree() {
        let mut rng = Rng::new(2);
        let a = Tensor::<f64>::randn([2, 3, 4, 5], &mut rng);
        let b = Tensor::<f64>::randn([2, 3, 6, 5], &mut rng);
        let abt = batched_matmul(&a, &b, false, true).unwrap();
        let bt = gather(&b, &IndexMap::permute(b.shape(), [0, 1, 3, 2])).unwrap();
        let ref_ = batched_matmul(&a, &bt, false, false).unwrap();
        assert!(abt.max_abs_diff(&ref_) < 1e-12);
        let at = gather(&a, &IndexMap::permute(a.shape(), [0, 1, 3, 2])).unwrap();
        let ta = batched_matmul(&at, &bt, true, false).unwrap();
        assert!(ta.max_abs_diff(&ref_) < 1e-12);
        let tt = batched_matmul(&at, &b, true, true).unwrap();
        assert!(tt.max_abs_diff(&ref_) < 1e-12);
    }

    #[test]
    fn pointwise_conv_sums_channels() {
        let x = Tensor::<f64>::ones([1, 1, 1, 2]);
        let w = Tensor::<f64>::ones([1, 1, 2, 3]);
        let b = Tensor::<f64>::zeros([1, 1, 1, 3]);
        let y = conv2d(&x, &w, Some(&b), 1, 1, Padding::Same).unwrap();
        assert_eq!(y.data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn depthwise_identity_kernel_is_identity() {
        let mut rng = Rng::new(3);
        let x = Tensor::<f64>::randn([1, 6, 5, 4], &mut rng);
        let w = Tensor::<f64>::from_fn([3, 3, 1, 4], |[ky, kx, _, _]| (ky == 1 && kx == 1) as u8 as f64);
        let y = conv2d(&x, &w, None, 1, 4, Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_rejects_bad_groups_and_even_kernels() {
        let x = Tensor::<f32>::ones([1, 4, 4, 3]);
        let w = Tensor::<f32>::ones([3, 3, 1, 3]);
        assert!(matches!(conv2d(&x, &w, None, 1, 2, Padding::Same), Err(crate::Error::Config(_))));
        let w = Tensor::<f32>::ones([2, 2, 3, 3]);
        assert!(matches!(conv2d(&x, &w, None, 1, 1, Padding::Valid), Err(crate::Error::Config(_))));
    }

    #[test]
    fn stride_two_same_padding_rounds_up() {
        let x = Tensor::<f32>::ones([1, 7, 8, 2]);
        let w = Tensor::<f32>::ones([3, 3, 1, 4]);
        let y = conv2d(&x, &w, None, 2, 2, Padding::Same).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 4, 4, 4));
    }

    #[test]
    fn softmax_basic_cases() {
        let y = softmax(&t64([1, 1, 1, 2], vec![0.0, 0.0]));
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax(&t64([1, 1, 1, 2], vec![1000.0, 0.0]));
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && y.data()[1] < 1e-300 + 1e-12);
        assert!(y.is_finite());
    }

    #[test]
    fn layer_norm_cases() {
        let x = Tensor::<f64>::full([1, 2, 2, 5], 3.0);
        let g = Tensor::ones([1, 1, 1, 5]);
        let b = Tensor::zeros([1, 1, 1, 5]);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let mut rng = Rng::new(4);
        let x = Tensor::<f64>::randn([1, 2, 2, 5], &mut rng);
        let y = layer_norm(&x, &Tensor::zeros([1, 1, 1, 5]), &Tensor::full([1, 1, 1, 5], 5.0), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn gelu_reference_points() {
        let y = gelu(&t64([1, 1, 1, 3], vec![0.0, 10.0, -10.0]));
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-6);
        assert!(y.data()[2].abs() < 1e-6);
    }

    #[test]
    fn upsample_constant_and_single_pixel() {
        let y = bilinear_upsample_x2(&Tensor::<f64>::full([1, 3, 2, 2], 1.5));
        assert_eq!(y.shape(), Shape::new(1, 6, 4, 2));
        assert!(y.data().iter().all(|&v| v == 1.5));
        let y = bilinear_upsample_x2(&t64([1, 1, 1, 1], vec![4.0]));
        assert_eq!(y.data(), &[4.0; 4]);
    }

    #[test]
    fn pad_crop_rules() {
        let mut rng = Rng::new(5);
        let x = Tensor::<f32>::randn([1, 15, 15, 2], &mut rng);
        let p = pad_spatial(&x, 21, 21).unwrap();
        for y in 0..21 {
            for xx in 0..21 {
                if y >= 15 || xx >= 15 {
                    assert_eq!(p.at(0, y, xx, 0), 0.0);
                }
            }
        }
        assert_eq!(crop_spatial(&p, 15, 15).unwrap(), x);
        assert_eq!(pad_spatial(&x, 15, 15).unwrap(), x);
        assert!(matches!(pad_spatial(&x, 14, 15), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::<f64>::zeros([2, 1, 1, 4]);
        let (loss, probs) = cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!(probs.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }
}
