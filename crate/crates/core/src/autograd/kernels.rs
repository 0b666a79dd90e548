//! Forward and backward kernels for the primitives recorded on a [`Tape`].
//!
//! Every kernel that produces gradients for a trainable parameter can emit
//! them either summed over the batch or kept per sample (leading `N` axis),
//! which is what per-sample gradient clipping consumes.
//!
//! [`Tape`]: super::Tape

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How a kernel should report gradients for a parameter input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ParamGrad {
    Skip,
    Summed,
    PerSample,
}

/// Shape bookkeeping for one convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub(crate) fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (n, cin, h, w) = match *input {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape("conv2d", format!("input {input:?} is not NCHW"))),
        };
        let (cout, wcin, kh, kw) = match *weight {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => return Err(Error::shape("conv2d", format!("weight {weight:?} is not OIHW"))),
        };
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {h}x{w} (pad {pad})"),
            ));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {} output channels", b.shape(), g.cout),
            ));
        }
    }
    let (k, p) = (g.k(), g.p());
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * p;
    let mut out = vec![T::ZERO; g.n * out_per];
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::ZERO; k * p] };
    for n in 0..g.n {
        let xn = &x.data()[n * in_per..(n + 1) * in_per];
        let cols_n: &[T] = if g.pointwise() {
            xn
        } else {
            im2col(xn, &g, &mut cols);
            &cols
        };
        let yn = &mut out[n * out_per..(n + 1) * out_per];
        T::gemm(
            g.cout,
            k,
            p,
            T::ONE,
            weight.data(),
            (k as isize, 1),
            cols_n,
            (p as isize, 1),
            T::ZERO,
            yn,
            (p as isize, 1),
        );
        if let Some(b) = bias {
            for (co, row) in yn.chunks_exact_mut(p).enumerate() {
                let bv = b.data()[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.n, g.cout, g.ho, g.wo], out))
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_input: bool,
    weight_mode: ParamGrad,
    bias_mode: ParamGrad,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    let (k, p) = (g.k(), g.p());
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * p;
    let wlen = weight.numel();

    let mut dx = want_input.then(|| vec![T::ZERO; x.numel()]);
    let mut dw = match weight_mode {
        ParamGrad::Skip => None,
        ParamGrad::Summed => Some(vec![T::ZERO; wlen]),
        ParamGrad::PerSample => Some(vec![T::ZERO; g.n * wlen]),
    };
    let mut db = match bias_mode {
        ParamGrad::Skip => None,
        ParamGrad::Summed => Some(vec![T::ZERO; g.cout]),
        ParamGrad::PerSample => Some(vec![T::ZERO; g.n * g.cout]),
    };
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::ZERO; k * p] };
    let mut dcols = if want_input && !g.pointwise() {
        vec![T::ZERO; k * p]
    } else {
        Vec::new()
    };

    for n in 0..g.n {
        let gyn = &gy.data()[n * out_per..(n + 1) * out_per];
        if let Some(dw) = dw.as_mut() {
            let xn = &x.data()[n * in_per..(n + 1) * in_per];
            let cols_n: &[T] = if g.pointwise() {
                xn
            } else {
                im2col(xn, &g, &mut cols);
                &cols
            };
            let (slot, beta) = match weight_mode {
                ParamGrad::PerSample => (&mut dw[n * wlen..(n + 1) * wlen], T::ZERO),
                _ => (&mut dw[..], T::ONE),
            };
            // dW = gy_n (Cout×P) · cols_nᵀ (P×K)
            T::gemm(
                g.cout,
                p,
                k,
                T::ONE,
                gyn,
                (p as isize, 1),
                cols_n,
                (1, p as isize),
                beta,
                slot,
                (k as isize, 1),
            );
        }
        if let Some(db) = db.as_mut() {
            let off = if bias_mode == ParamGrad::PerSample { n * g.cout } else { 0 };
            for (co, row) in gyn.chunks_exact(p).enumerate() {
                db[off + co] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_per..(n + 1) * in_per];
            if g.pointwise() {
                // dX_n = Wᵀ (Cin×Cout) · gy_n (Cout×P)
                T::gemm(
                    g.cin,
                    g.cout,
                    p,
                    T::ONE,
                    weight.data(),
                    (1, k as isize),
                    gyn,
                    (p as isize, 1),
                    T::ZERO,
                    dxn,
                    (p as isize, 1),
                );
            } else {
                T::gemm(
                    k,
                    g.cout,
                    p,
                    T::ONE,
                    weight.data(),
                    (1, k as isize),
                    gyn,
                    (p as isize, 1),
                    T::ZERO,
                    &mut dcols,
                    (p as isize, 1),
                );
                col2im(&dcols, &g, dxn);
            }
        }
    }

    let per_sample_shape = |inner: &[usize]| {
        let mut s = vec![g.n];
        s.extend_from_slice(inner);
        s
    };
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        weight: dw.map(|d| {
            let shape = match weight_mode {
                ParamGrad::PerSample => per_sample_shape(weight.shape()),
                _ => weight.shape().to_vec(),
            };
            Tensor::from_parts(shape, d)
        }),
        bias: db.map(|d| {
            let shape = match bias_mode {
                ParamGrad::PerSample => vec![g.n, g.cout],
                _ => vec![g.cout],
            };
            Tensor::from_parts(shape, d)
        }),
    })
}

pub(crate) fn pool_out(
    op: &'static str,
    extent: usize,
    window: usize,
    stride: usize,
    pad: usize,
) -> Result<usize> {
    if window == 0 || stride == 0 {
        return Err(Error::shape(op, "window and stride must be positive"));
    }
    if pad >= window {
        return Err(Error::shape(op, format!("padding {pad} must be below window {window}")));
    }
    if window > extent + 2 * pad {
        return Err(Error::shape(
            op,
            format!("window {window} larger than padded input {}", extent + 2 * pad),
        ));
    }
    Ok((extent + 2 * pad - window) / stride + 1)
}

/// Max pooling. Returns the output and, per output cell, the flat input index
/// it was taken from (first maximal element in row-major window order).
pub(crate) fn maxpool2d_forward<T: Scalar>(
    x: &Tensor<T>,
    window: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4("maxpool2d")?;
    let ho = pool_out("maxpool2d", h, window, stride, pad)?;
    let wo = pool_out("maxpool2d", w, window, stride, pad)?;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            let y0 = (oy * stride) as isize - pad as isize;
            for ox in 0..wo {
                let x0 = (ox * stride) as isize - pad as isize;
                let mut best = usize::MAX;
                let mut best_v = T::neg_infinity();
                for ky in 0..window as isize {
                    let iy = y0 + ky;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..window as isize {
                        let ix = x0 + kx;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best == usize::MAX || xd[idx] > best_v {
                            best = idx;
                            best_v = xd[idx];
                        }
                    }
                }
                out.push(best_v);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, ho, wo], out), argmax))
}

pub(crate) fn maxpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    gy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&src, &g) in argmax.iter().zip(gy.data()) {
        d[src] += g;
    }
    dx
}

/// Valid (unpadded) index range covered by window position `o`.
fn window_span(o: usize, stride: usize, pad: usize, window: usize, extent: usize) -> (usize, usize) {
    let start = (o * stride) as isize - pad as isize;
    let lo = start.max(0) as usize;
    let hi = ((start + window as isize) as usize).min(extent);
    (lo, hi)
}

/// Average pooling; padded cells are excluded from each window's mean.
pub(crate) fn avgpool2d_forward<T: Scalar>(
    x: &Tensor<T>,
    window: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("avgpool2d")?;
    let ho = pool_out("avgpool2d", h, window, stride, pad)?;
    let wo = pool_out("avgpool2d", w, window, stride, pad)?;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            let (y0, y1) = window_span(oy, stride, pad, window, h);
            for ox in 0..wo {
                let (x0, x1) = window_span(ox, stride, pad, window, w);
                let mut acc = T::ZERO;
                for y in y0..y1 {
                    for v in &xd[base + y * w + x0..base + y * w + x1] {
                        acc += *v;
                    }
                }
                out.push(acc / T::from_f64(((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, ho, wo], out))
}

pub(crate) fn avgpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    window: usize,
    stride: usize,
    pad: usize,
    gy: &Tensor<T>,
) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (ho, wo) = (gy.shape()[2], gy.shape()[3]);
    let planes = input_shape[0] * input_shape[1];
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    let g = gy.data();
    for plane in 0..planes {
        let base = plane * h * w;
        for oy in 0..ho {
            let (y0, y1) = window_span(oy, stride, pad, window, h);
            for ox in 0..wo {
                let (x0, x1) = window_span(ox, stride, pad, window, w);
                let gv = g[(plane * ho + oy) * wo + ox] / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                for y in y0..y1 {
                    for v in &mut d[base + y * w + x0..base + y * w + x1] {
                        *v += gv;
                    }
                }
            }
        }
    }
    dx
}

/// Bin `[start, end)` of `i` out of `bins` over an axis of length `extent`.
pub(crate) fn adaptive_bin(i: usize, bins: usize, extent: usize) -> (usize, usize) {
    let start = i * extent / bins;
    let end = ((i + 1) * extent).div_ceil(bins);
    (start, end)
}

pub(crate) fn adaptive_avgpool_forward<T: Scalar>(
    x: &Tensor<T>,
    oh: usize,
    ow: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("adaptive_avgpool")?;
    if oh == 0 || ow == 0 {
        return Err(Error::shape("adaptive_avgpool", "output size must be non-zero"));
    }
    if oh > h || ow > w {
        return Err(Error::shape(
            "adaptive_avgpool",
            format!("output {oh}x{ow} larger than input {h}x{w}"),
        ));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            let (y0, y1) = adaptive_bin(i, oh, h);
            for j in 0..ow {
                let (x0, x1) = adaptive_bin(j, ow, w);
                let mut acc = T::ZERO;
                for y in y0..y1 {
                    for v in &xd[base + y * w + x0..base + y * w + x1] {
                        acc += *v;
                    }
                }
                out.push(acc / T::from_f64(((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub(crate) fn adaptive_avgpool_backward<T: Scalar>(
    input_shape: &[usize],
    gy: &Tensor<T>,
) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (gy.shape()[2], gy.shape()[3]);
    let planes = input_shape[0] * input_shape[1];
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    let g = gy.data();
    for plane in 0..planes {
        let base = plane * h * w;
        for i in 0..oh {
            let (y0, y1) = adaptive_bin(i, oh, h);
            for j in 0..ow {
                let (x0, x1) = adaptive_bin(j, ow, w);
                let gv = g[(plane * oh + i) * ow + j]
                    / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                for y in y0..y1 {
                    for v in &mut d[base + y * w + x0..base + y * w + x1] {
                        *v += gv;
                    }
                }
            }
        }
    }
    dx
}

/// Saved statistics of a group-norm forward pass.
pub(crate) struct GroupNormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn group_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    eps: f64,
) -> Result<(Tensor<T>, GroupNormSaved<T>)> {
    let (n, c, h, w) = x.dims4("group_norm")?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(
            "group_norm",
            format!("{c} channels not divisible into {groups} groups"),
        ));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "group_norm",
            format!("affine {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    let hw = h * w;
    let cpg = c / groups;
    let m = cpg * hw;
    let xd = x.data();
    let mut xhat = vec![T::ZERO; xd.len()];
    let mut out = vec![T::ZERO; xd.len()];
    let mut inv_std = Vec::with_capacity(n * groups);
    for s in 0..n {
        for g in 0..groups {
            let lo = (s * c + g * cpg) * hw;
            let seg = &xd[lo..lo + m];
            let mean = seg.iter().map(|v| v.as_f64()).sum::<f64>() / m as f64;
            let var = seg
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(T::from_f64(inv));
            let (mean_t, inv_t) = (T::from_f64(mean), T::from_f64(inv));
            for ci in 0..cpg {
                let ch = g * cpg + ci;
                let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                let off = lo + ci * hw;
                for i in off..off + hw {
                    let xh = (xd[i] - mean_t) * inv_t;
                    xhat[i] = xh;
                    out[i] = ga * xh + be;
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        GroupNormSaved { xhat, inv_std },
    ))
}

pub(crate) struct GroupNormGrads<T> {
    pub input: Option<Tensor<T>>,
    pub gamma: Option<Tensor<T>>,
    pub beta: Option<Tensor<T>>,
}

pub(crate) fn group_norm_backward<T: Scalar>(
    shape: &[usize],
    gamma: &Tensor<T>,
    groups: usize,
    saved: &GroupNormSaved<T>,
    gy: &Tensor<T>,
    want_input: bool,
    gamma_mode: ParamGrad,
    beta_mode: ParamGrad,
) -> GroupNormGrads<T> {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let cpg = c / groups;
    let m = cpg * hw;
    let g = gy.data();
    let xhat = &saved.xhat;

    let alloc = |mode: ParamGrad| match mode {
        ParamGrad::Skip => None,
        ParamGrad::Summed => Some(vec![T::ZERO; c]),
        ParamGrad::PerSample => Some(vec![T::ZERO; n * c]),
    };
    let mut dgamma = alloc(gamma_mode);
    let mut dbeta = alloc(beta_mode);
    let mut dx = want_input.then(|| vec![T::ZERO; g.len()]);

    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * hw;
            if let Some(dg) = dgamma.as_mut() {
                let slot = if gamma_mode == ParamGrad::PerSample { s * c + ch } else { ch };
                let acc: T = (off..off + hw).map(|i| g[i] * xhat[i]).sum();
                dg[slot] += acc;
            }
            if let Some(db) = dbeta.as_mut() {
                let slot = if beta_mode == ParamGrad::PerSample { s * c + ch } else { ch };
                let acc: T = g[off..off + hw].iter().copied().sum();
                db[slot] += acc;
            }
        }
        if let Some(dx) = dx.as_mut() {
            let mf = T::from_f64(m as f64);
            for grp in 0..groups {
                let lo = (s * c + grp * cpg) * hw;
                let inv = saved.inv_std[s * groups + grp];
                let mut s1 = T::ZERO;
                let mut s2 = T::ZERO;
                for i in lo..lo + m {
                    let ch = (i / hw) % c;
                    let dxh = g[i] * gamma.data()[ch];
                    s1 += dxh;
                    s2 += dxh * xhat[i];
                }
                for i in lo..lo + m {
                    let ch = (i / hw) % c;
                    let dxh = g[i] * gamma.data()[ch];
                    dx[i] = inv / mf * (mf * dxh - s1 - xhat[i] * s2);
                }
            }
        }
    }

    let shape_for = |mode: ParamGrad| match mode {
        ParamGrad::PerSample => vec![n, c],
        _ => vec![c],
    };
    GroupNormGrads {
        input: dx.map(|d| Tensor::from_parts(shape.to_vec(), d)),
        gamma: dgamma.map(|d| Tensor::from_parts(shape_for(gamma_mode), d)),
        beta: dbeta.map(|d| Tensor::from_parts(shape_for(beta_mode), d)),
    }
}

/// `x·W + b` for `x: [N, F]`, `W: [F, G]`, `b: [G]`.
pub(crate) fn linear_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, f) = x.dims2("linear")?;
    let (wf, g) = weight.dims2("linear")?;
    if wf != f {
        return Err(Error::shape(
            "linear",
            format!("input has {f} features, weight expects {wf}"),
        ));
    }
    let mut out = vec![T::ZERO; n * g];
    if let Some(b) = bias {
        if b.shape() != [g] {
            return Err(Error::shape("linear", format!("bias {:?} for {g} outputs", b.shape())));
        }
        for row in out.chunks_exact_mut(g) {
            row.copy_from_slice(b.data());
        }
    }
    T::gemm(
        n,
        f,
        g,
        T::ONE,
        x.data(),
        (f as isize, 1),
        weight.data(),
        (g as isize, 1),
        T::ONE,
        &mut out,
        (g as isize, 1),
    );
    Ok(Tensor::from_parts(vec![n, g], out))
}

pub(crate) struct LinearGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    gy: &Tensor<T>,
    want_input: bool,
    weight_mode: ParamGrad,
    bias_mode: ParamGrad,
) -> LinearGrads<T> {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let g = weight.shape()[1];
    let input = want_input.then(|| {
        let mut dx = vec![T::ZERO; n * f];
        // dX = gy (N×G) · Wᵀ (G×F)
        T::gemm(
            n,
            g,
            f,
            T::ONE,
            gy.data(),
            (g as isize, 1),
            weight.data(),
            (1, g as isize),
            T::ZERO,
            &mut dx,
            (f as isize, 1),
        );
        Tensor::from_parts(vec![n, f], dx)
    });
    let weight_grad = match weight_mode {
        ParamGrad::Skip => None,
        ParamGrad::Summed => {
            let mut dw = vec![T::ZERO; f * g];
            T::gemm(
                f,
                n,
                g,
                T::ONE,
                x.data(),
                (1, f as isize),
                gy.data(),
                (g as isize, 1),
                T::ZERO,
                &mut dw,
                (g as isize, 1),
            );
            Some(Tensor::from_parts(vec![f, g], dw))
        }
        ParamGrad::PerSample => {
            let mut dw = vec![T::ZERO; n * f * g];
            for s in 0..n {
                let xs = &x.data()[s * f..(s + 1) * f];
                let gs = &gy.data()[s * g..(s + 1) * g];
                let slot = &mut dw[s * f * g..(s + 1) * f * g];
                for (row, &xv) in slot.chunks_exact_mut(g).zip(xs) {
                    for (o, &gv) in row.iter_mut().zip(gs) {
                        *o = xv * gv;
                    }
                }
            }
            Some(Tensor::from_parts(vec![n, f, g], dw))
        }
    };
    let bias_grad = match bias_mode {
        ParamGrad::Skip => None,
        ParamGrad::Summed => {
            let mut db = vec![T::ZERO; g];
            for row in gy.data().chunks_exact(g) {
                for (o, &v) in db.iter_mut().zip(row) {
                    *o += v;
                }
            }
            Some(Tensor::from_parts(vec![g], db))
        }
        ParamGrad::PerSample => Some(gy.clone()),
    };
    LinearGrads {
        input,
        weight: weight_grad,
        bias: bias_grad,
    }
}

/// Numerically stable softmax of each row of `[N, K]` logits.
pub(crate) fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<T> {
    let k = logits.shape()[1];
    let mut probs = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks_exact(k) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = probs.len();
        let mut z = T::ZERO;
        for &v in row {
            let e = (v - mx).exp();
            z += e;
            probs.push(e);
        }
        probs[start..].iter_mut().for_each(|p| *p /= z);
    }
    probs
}
