//! Pure forward primitives and the adjoint kernels the tape replays.
//!
//! Every forward op validates shapes up front and rejects non-finite output.
//! Loops over the batch run on rayon, but each sample is computed with a fixed
//! loop nesting and batch reductions are summed in sample order, so results do
//! not depend on the thread count.

use rayon::prelude::*;

use super::{numel, Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Stride, zero-padding and group count of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn same(kernel: usize) -> Self {
        Self { stride: 1, padding: kernel / 2, groups: 1 }
    }

    pub fn depthwise(kernel: usize, channels: usize) -> Self {
        Self { stride: 1, padding: kernel / 2, groups: channels }
    }
}

impl Default for ConvGeom {
    fn default() -> Self {
        Self { stride: 1, padding: 0, groups: 1 }
    }
}

/// Convolution weights plus geometry.
///
/// `weight` is `[C_out, C_in / groups, k, k]`; `bias`, when present, is `[C_out, 1, 1, 1]`.
#[derive(Clone, Debug)]
pub struct ConvParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub geom: ConvGeom,
}

pub fn conv2d<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    conv2d_raw(x, &p.weight, p.bias.as_ref(), p.geom)
}

/// Per-channel convolution; `p.geom.groups` must equal the channel count.
pub fn depthwise_conv2d<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let c = x.channels();
    if p.geom.groups != c || p.weight.shape()[0] != c {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("groups {} and C_out {} must both equal C_in {}", p.geom.groups, p.weight.shape()[0], c),
        ));
    }
    conv2d(x, p)
}

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
    geom: ConvGeom,
}

impl ConvDims {
    fn direct(&self) -> bool {
        self.k == 1 && self.geom.stride == 1 && self.geom.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.cin_g * self.k * self.k
    }
}

fn conv_dims<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, geom: ConvGeom) -> Result<ConvDims> {
    let [n, c_in, h, wd] = x.shape();
    let [c_out, cin_g, kh, kw] = w.shape();
    let err = |msg: String| Err(Error::shape("conv2d", msg));
    if geom.stride == 0 || geom.groups == 0 {
        return err(format!("stride {} and groups {} must be positive", geom.stride, geom.groups));
    }
    if kh != kw || kh == 0 {
        return err(format!("kernel must be square and non-empty, got {}x{}", kh, kw));
    }
    if c_in % geom.groups != 0 || c_out % geom.groups != 0 {
        return err(format!("C_in {} and C_out {} must be divisible by groups {}", c_in, c_out, geom.groups));
    }
    if cin_g != c_in / geom.groups {
        return err(format!("input has {} channels but weight expects {} per group x {} groups", c_in, cin_g, geom.groups));
    }
    if let Some(b) = b {
        if b.shape() != [c_out, 1, 1, 1] {
            return err(format!("bias shape {:?} does not match C_out {}", b.shape(), c_out));
        }
    }
    let (hp, wp) = (h + 2 * geom.padding, wd + 2 * geom.padding);
    if hp < kh || wp < kh {
        return err(format!("kernel {} larger than padded input {}x{}", kh, hp, wp));
    }
    let ho = (hp - kh) / geom.stride + 1;
    let wo = (wp - kh) / geom.stride + 1;
    Ok(ConvDims {
        n,
        c_in,
        h,
        w: wd,
        c_out,
        k: kh,
        ho,
        wo,
        cin_g,
        cout_g: c_out / geom.groups,
        geom,
    })
}

/// Unfolds one group of one sample into a `[cin_g·k·k, ho·wo]` column matrix.
fn im2col<T: Real>(src: &[T], d: &ConvDims, cols: &mut [T]) {
    let (k, s, p) = (d.k, d.geom.stride as isize, d.geom.padding as isize);
    let hw_out = d.ho * d.wo;
    for c in 0..d.cin_g {
        let plane = &src[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..d.ho {
                    let iy = oy as isize * s + ki as isize - p;
                    let line = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + kj as isize - p;
                        *v = if ix < 0 || ix >= d.w as isize { T::zero() } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back, accumulating into one group of one sample.
fn col2im<T: Real>(cols: &[T], d: &ConvDims, dst: &mut [T]) {
    let (k, s, p) = (d.k, d.geom.stride as isize, d.geom.padding as isize);
    let hw_out = d.ho * d.wo;
    for c in 0..d.cin_g {
        let plane = &mut dst[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..d.ho {
                    let iy = oy as isize * s + ki as isize - p;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let line = &src[oy * d.wo..(oy + 1) * d.wo];
                    let dst_row = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = ox as isize * s + kj as isize - p;
                        if ix >= 0 && ix < d.w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_raw<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let d = conv_dims(x, weight, bias, geom)?;
    let in_per = d.c_in * d.h * d.w;
    let out_per = d.c_out * d.ho * d.wo;
    let hw_out = d.ho * d.wo;
    let kk = d.col_rows();
    let mut out = vec![T::zero(); d.n * out_per];
    if out_per > 0 {
        out.par_chunks_mut(out_per).enumerate().for_each(|(n, dst)| {
            let src = &x.data()[n * in_per..(n + 1) * in_per];
            let mut cols = if d.direct() { Vec::new() } else { vec![T::zero(); kk * hw_out] };
            for g in 0..d.geom.groups {
                let gsrc = &src[g * d.cin_g * d.h * d.w..(g + 1) * d.cin_g * d.h * d.w];
                let b: &[T] = if d.direct() {
                    gsrc
                } else {
                    im2col(gsrc, &d, &mut cols);
                    &cols
                };
                let wg = &weight.data()[g * d.cout_g * kk..(g + 1) * d.cout_g * kk];
                let cg = &mut dst[g * d.cout_g * hw_out..(g + 1) * d.cout_g * hw_out];
                T::gemm(d.cout_g, kk, hw_out, wg, kk as isize, 1, b, hw_out as isize, 1, T::zero(), cg, hw_out as isize, 1);
            }
            if let Some(bias) = bias {
                for (c, plane) in dst.chunks_mut(hw_out).enumerate() {
                    let bv = bias.data()[c];
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    }
    Tensor::new([d.n, d.c_out, d.ho, d.wo], out)?.finite("conv2d")
}

/// Adjoint of [`conv2d_raw`]: returns `(dx, dweight, dbias)`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    geom: ConvGeom,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let d = conv_dims(x, weight, None, geom)?;
    if grad_out.shape() != [d.n, d.c_out, d.ho, d.wo] {
        return Err(Error::shape("conv2d_backward", format!("grad {:?}", grad_out.shape())));
    }
    let in_per = d.c_in * d.h * d.w;
    let out_per = d.c_out * d.ho * d.wo;
    let hw_out = d.ho * d.wo;
    let kk = d.col_rows();
    let wlen = weight.numel();

    let mut dx = vec![T::zero(); d.n * in_per];
    let partials: Vec<(Vec<T>, Vec<T>)> = if in_per == 0 {
        Vec::new()
    } else {
        dx.par_chunks_mut(in_per)
            .enumerate()
            .map(|(n, dxs)| {
                let src = &x.data()[n * in_per..(n + 1) * in_per];
                let go = &grad_out.data()[n * out_per..(n + 1) * out_per];
                let mut dw = vec![T::zero(); wlen];
                let mut cols = if d.direct() { Vec::new() } else { vec![T::zero(); kk * hw_out] };
                let mut dcols = vec![T::zero(); kk * hw_out];
                for g in 0..d.geom.groups {
                    let goff = g * d.cin_g * d.h * d.w..(g + 1) * d.cin_g * d.h * d.w;
                    let gsrc = &src[goff.clone()];
                    let b: &[T] = if d.direct() {
                        gsrc
                    } else {
                        im2col(gsrc, &d, &mut cols);
                        &cols
                    };
                    let gg = &go[g * d.cout_g * hw_out..(g + 1) * d.cout_g * hw_out];
                    let wrange = g * d.cout_g * kk..(g + 1) * d.cout_g * kk;
                    // dW_g = dY_g · colsᵀ
                    T::gemm(
                        d.cout_g, hw_out, kk, gg, hw_out as isize, 1, b, 1, hw_out as isize,
                        T::zero(), &mut dw[wrange.clone()], kk as isize, 1,
                    );
                    // dcols = W_gᵀ · dY_g
                    let wg = &weight.data()[wrange];
                    if d.direct() {
                        T::gemm(
                            kk, d.cout_g, hw_out, wg, 1, kk as isize, gg, hw_out as isize, 1,
                            T::zero(), &mut dxs[goff], hw_out as isize, 1,
                        );
                    } else {
                        T::gemm(
                            kk, d.cout_g, hw_out, wg, 1, kk as isize, gg, hw_out as isize, 1,
                            T::zero(), &mut dcols, hw_out as isize, 1,
                        );
                        col2im(&dcols, &d, &mut dxs[goff]);
                    }
                }
                let db = if has_bias {
                    go.chunks(hw_out).map(|plane| plane.iter().copied().sum()).collect()
                } else {
                    Vec::new()
                };
                (dw, db)
            })
            .collect()
    };

    let mut dw = vec![T::zero(); wlen];
    let mut db = vec![T::zero(); if has_bias { d.c_out } else { 0 }];
    for (pw, pb) in &partials {
        dw.iter_mut().zip(pw).for_each(|(a, &b)| *a += b);
        db.iter_mut().zip(pb).for_each(|(a, &b)| *a += b);
    }
    let db = if has_bias { Some(Tensor::new([d.c_out, 1, 1, 1], db)?) } else { None };
    Ok((Tensor::new(x.shape(), dx)?, Tensor::new(weight.shape(), dw)?, db))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    zip_map(x, grad, |v, g| if v > T::zero() { g } else { T::zero() })
}

pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Takes the forward *output* `y`, since σ'(x) = y(1 − y).
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    zip_map(y, grad, |s, g| g * s * (T::one() - s))
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor { shape: a.shape(), data }
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    zip_map(a, b, |x, y| x + y).finite("add")
}

pub fn scale<T: Real>(x: &Tensor<T>, s: T) -> Result<Tensor<T>> {
    x.map(|v| v * s).finite("scale")
}

fn broadcast_ok(a: Shape, b: Shape) -> bool {
    a.iter().zip(&b).all(|(&x, &y)| y == x || y == 1)
}

/// Elementwise product; `b` broadcasts over any axis where its extent is 1
/// (per-channel `[N,C,1,1]` gates, per-pixel `[N,1,H,W]` gates).
pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if !broadcast_ok(a.shape(), b.shape()) {
        return Err(Error::shape("mul", format!("{:?} does not broadcast onto {:?}", b.shape(), a.shape())));
    }
    if a.shape() == b.shape() {
        return zip_map(a, b, |x, y| x * y).finite("mul");
    }
    let [n, c, h, w] = a.shape();
    let bs = b.shape();
    let mut out = Vec::with_capacity(a.numel());
    let mut i = 0;
    for ni in 0..n {
        for ci in 0..c {
            for yi in 0..h {
                for xi in 0..w {
                    let bv = b.at(ni.min(bs[0] - 1), ci.min(bs[1] - 1), yi.min(bs[2] - 1), xi.min(bs[3] - 1));
                    out.push(a.data()[i] * bv);
                    i += 1;
                }
            }
        }
    }
    Tensor::new(a.shape(), out)?.finite("mul")
}

/// Adjoint of [`mul`]: `(da, db)` with `db` summed back over broadcast axes.
pub fn mul_backward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, grad: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    if a.shape() == b.shape() {
        return (zip_map(grad, b, |g, y| g * y), zip_map(grad, a, |g, x| g * x));
    }
    let [n, c, h, w] = a.shape();
    let bs = b.shape();
    let mut da = Vec::with_capacity(a.numel());
    let mut db = Tensor::zeros(bs);
    let mut i = 0;
    for ni in 0..n {
        for ci in 0..c {
            for yi in 0..h {
                for xi in 0..w {
                    let bi = db.index(ni.min(bs[0] - 1), ci.min(bs[1] - 1), yi.min(bs[2] - 1), xi.min(bs[3] - 1));
                    let g = grad.data()[i];
                    da.push(g * b.data()[bi]);
                    db.data_mut()[bi] += g * a.data()[i];
                    i += 1;
                }
            }
        }
    }
    (Tensor { shape: a.shape(), data: da }, db)
}

pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
    let [n, _, h, w] = first.shape();
    let mut c_total = 0;
    for p in parts {
        let [pn, pc, ph, pw] = p.shape();
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape("concat_channels", format!("{:?} vs {:?}", p.shape(), first.shape())));
        }
        c_total += pc;
    }
    let mut data = Vec::with_capacity(n * c_total * h * w);
    for ni in 0..n {
        for p in parts {
            let per = p.channels() * h * w;
            data.extend_from_slice(&p.data()[ni * per..(ni + 1) * per]);
        }
    }
    Tensor::new([n, c_total, h, w], data)
}

pub fn slice_channels<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if start + len > c {
        return Err(Error::shape("slice_channels", format!("channels {}..{} of {}", start, start + len, c)));
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * len * hw);
    for ni in 0..n {
        let base = (ni * c + start) * hw;
        data.extend_from_slice(&x.data()[base..base + len * hw]);
    }
    Tensor::new([n, len, h, w], data)
}

/// Scatters `grad` (shaped like the slice) back into a zero tensor shaped `full`.
pub fn slice_channels_backward<T: Real>(full: Shape, start: usize, grad: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = full;
    let len = grad.channels();
    let hw = h * w;
    let mut out = Tensor::zeros(full);
    for ni in 0..n {
        let dst = (ni * c + start) * hw;
        let src = ni * len * hw;
        out.data_mut()[dst..dst + len * hw].copy_from_slice(&grad.data()[src..src + len * hw]);
    }
    out
}

pub fn pad2d<T: Real>(x: &Tensor<T>, pad: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros([n, c, hp, wp]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                let src = x.index(ni, ci, y, 0);
                let dst = out.index(ni, ci, y + pad, pad);
                out.data_mut()[dst..dst + w].copy_from_slice(&x.data()[src..src + w]);
            }
        }
    }
    out
}

pub fn pad2d_backward<T: Real>(pad: usize, grad: &Tensor<T>) -> Tensor<T> {
    let [n, c, hp, wp] = grad.shape();
    let (h, w) = (hp - 2 * pad, wp - 2 * pad);
    Tensor::from_fn([n, c, h, w], |ni, ci, y, x| grad.at(ni, ci, y + pad, x + pad))
}

fn require_spatial<T: Real>(op: &'static str, x: &Tensor<T>) -> Result<()> {
    if x.height() == 0 || x.width() == 0 {
        return Err(Error::shape(op, "empty spatial plane"));
    }
    Ok(())
}

pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    require_spatial("global_avg_pool", x)?;
    let [n, c, h, w] = x.shape();
    let inv = T::one() / T::of((h * w) as f64);
    let data = (0..n * c).map(|i| x.data()[i * h * w..(i + 1) * h * w].iter().copied().sum::<T>() * inv).collect();
    Tensor::new([n, c, 1, 1], data)
}

pub fn global_avg_pool_backward<T: Real>(input: Shape, grad: &Tensor<T>) -> Tensor<T> {
    let [_, _, h, w] = input;
    let inv = T::one() / T::of((h * w) as f64);
    Tensor::from_fn(input, |n, c, _, _| grad.at(n, c, 0, 0) * inv)
}

/// Returns the pooled maxima and, per output, the flat input index of the (first) maximum.
pub fn global_max_pool_with_argmax<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    require_spatial("global_max_pool", x)?;
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut vals = Vec::with_capacity(n * c);
    let mut idx = Vec::with_capacity(n * c);
    for i in 0..n * c {
        let plane = &x.data()[i * hw..(i + 1) * hw];
        let (best, &v) = plane
            .iter()
            .enumerate()
            .fold((0, &plane[0]), |acc, (j, v)| if *v > *acc.1 { (j, v) } else { acc });
        vals.push(v);
        idx.push(i * hw + best);
    }
    Ok((Tensor::new([n, c, 1, 1], vals)?, idx))
}

pub fn global_max_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    global_max_pool_with_argmax(x).map(|(t, _)| t)
}

/// Routes each output gradient to the input position recorded in `argmax`.
pub fn scatter_backward<T: Real>(input: Shape, argmax: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(input);
    for (&i, &g) in argmax.iter().zip(grad.data()) {
        out.data_mut()[i] += g;
    }
    out
}

/// Per-pixel mean (plane 0) and max (plane 1) across channels, plus the max argmax.
pub fn channel_mean_max_with_argmax<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = x.shape();
    if c == 0 {
        return Err(Error::shape("channel_mean_max", "no channels"));
    }
    let hw = h * w;
    let inv = T::one() / T::of(c as f64);
    let mut out = Tensor::zeros([n, 2, h, w]);
    let mut argmax = Vec::with_capacity(n * hw);
    for ni in 0..n {
        for p in 0..hw {
            let mut sum = T::zero();
            let mut best = x.data()[ni * c * hw + p];
            let mut best_i = ni * c * hw + p;
            for ci in 0..c {
                let i = (ni * c + ci) * hw + p;
                let v = x.data()[i];
                sum += v;
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            out.data_mut()[ni * 2 * hw + p] = sum * inv;
            out.data_mut()[(ni * 2 + 1) * hw + p] = best;
            argmax.push(best_i);
        }
    }
    Ok((out, argmax))
}

pub fn channel_mean_max<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    channel_mean_max_with_argmax(x).map(|(t, _)| t)
}

pub fn channel_mean_max_backward<T: Real>(input: Shape, argmax: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input;
    let hw = h * w;
    let inv = T::one() / T::of(c as f64);
    let mut out = Tensor::zeros(input);
    for ni in 0..n {
        for p in 0..hw {
            let gm = grad.data()[ni * 2 * hw + p] * inv;
            for ci in 0..c {
                out.data_mut()[(ni * c + ci) * hw + p] += gm;
            }
            out.data_mut()[argmax[ni * hw + p]] += grad.data()[(ni * 2 + 1) * hw + p];
        }
    }
    out
}

/// `[N, r²C, H, W] → [N, C, rH, rW]`, with input channel `c·r² + i·r + j`
/// landing at output pixel `(r·y + i, r·x + j)` of channel `c`.
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::shape("pixel_shuffle", format!("{} channels not divisible by r²={}", c, r * r)));
    }
    let co = c / (r * r);
    Ok(Tensor::from_fn([n, co, h * r, w * r], |ni, ci, y, xx| {
        x.at(ni, ci * r * r + (y % r) * r + xx % r, y / r, xx / r)
    }))
}

/// Inverse of [`pixel_shuffle`]; also its adjoint.
pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::shape("pixel_unshuffle", format!("{}x{} not divisible by {}", h, w, r)));
    }
    Ok(Tensor::from_fn([n, c * r * r, h / r, w / r], |ni, ci, y, xx| {
        let (co, off) = (ci / (r * r), ci % (r * r));
        x.at(ni, co, y * r + off / r, xx * r + off % r)
    }))
}

pub fn sum_all<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    Tensor::scalar(x.data().iter().copied().sum()).finite("sum_all")
}

/// Mean absolute error against a fixed target.
pub fn l1_loss<T: Real>(x: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != target.shape() {
        return Err(Error::shape("l1_loss", format!("{:?} vs {:?}", x.shape(), target.shape())));
    }
    let n = T::of(numel(x.shape()).max(1) as f64);
    let s: T = x.data().iter().zip(target.data()).map(|(&a, &b)| (a - b).abs()).sum();
    Tensor::scalar(s / n).finite("l1_loss")
}

pub fn l1_loss_backward<T: Real>(x: &Tensor<T>, target: &Tensor<T>, grad: T) -> Tensor<T> {
    let g = grad / T::of(x.numel().max(1) as f64);
    zip_map(x, target, |a, b| {
        if a > b {
            g
        } else if a < b {
            -g
        } else {
            T::zero()
        }
    })
}
