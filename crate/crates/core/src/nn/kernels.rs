//! Raw NCHW kernels over flat slices. The tape wraps these with shape
//! checks and gradient bookkeeping.

use rayon::prelude::*;

use super::tensor::Real;

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h - self.k) / self.stride + 1,
            (self.w - self.k) / self.stride + 1,
        )
    }
}

/// Patch matrix [c_in·k·k, n·ho·wo] of a valid convolution.
fn im2col<T: Real>(g: ConvGeom, x: &[T]) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let (plane_in, plane_out) = (g.h * g.w, ho * wo);
    let cols = g.n * plane_out;
    let mut col = vec![T::ZERO; g.c_in * g.k * g.k * cols];
    col.par_chunks_mut(cols).enumerate().for_each(|(r, dst)| {
        let (c, ki, kj) = (r / (g.k * g.k), r / g.k % g.k, r % g.k);
        for n in 0..g.n {
            let src = &x[(n * g.c_in + c) * plane_in..][..plane_in];
            let dst = &mut dst[n * plane_out..][..plane_out];
            for oh in 0..ho {
                let row = &src[(oh * g.stride + ki) * g.w + kj..];
                let drow = &mut dst[oh * wo..][..wo];
                if g.stride == 1 {
                    drow.copy_from_slice(&row[..wo]);
                } else {
                    for (ow, d) in drow.iter_mut().enumerate() {
                        *d = row[ow * g.stride];
                    }
                }
            }
        }
    });
    col
}

/// [n, c, p] to [c, n·p].
fn to_channel_major<T: Real>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for (i, dst) in out.chunks_mut(p).enumerate() {
        let (ch, b) = (i / n, i % n);
        dst.copy_from_slice(&x[(b * c + ch) * p..][..p]);
    }
    out
}

/// Valid cross-correlation. `x`: [n, c_in, h, w], `w`: [c_out, c_in, k, k].
pub fn conv2d_forward<T: Real>(g: ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let kdim = g.c_in * g.k * g.k;
    let cols = g.n * p;
    let col = im2col(g, x);
    let mut prod = vec![T::ZERO; g.c_out * cols];
    T::gemm(
        g.c_out,
        kdim,
        cols,
        (w, [kdim, 1]),
        (&col, [cols, 1]),
        T::ZERO,
        (&mut prod, [cols, 1]),
    );
    let mut out = vec![T::ZERO; g.n * g.c_out * p];
    for (i, dst) in out.chunks_mut(p).enumerate() {
        let (n, o) = (i / g.c_out, i % g.c_out);
        let bias = b.map_or(T::ZERO, |b| b[o]);
        for (d, &v) in dst.iter_mut().zip(&prod[o * cols + n * p..][..p]) {
            *d = v + bias;
        }
    }
    out
}

/// Gradient of `conv2d_forward` w.r.t. its input.
pub fn conv2d_backward_input<T: Real>(g: ConvGeom, gy: &[T], w: &[T]) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let kdim = g.c_in * g.k * g.k;
    let cols = g.n * p;
    let gy_cols = to_channel_major(gy, g.n, g.c_out, p);
    let mut gcol = vec![T::ZERO; kdim * cols];
    T::gemm(
        kdim,
        g.c_out,
        cols,
        (w, [1, kdim]),
        (&gy_cols, [cols, 1]),
        T::ZERO,
        (&mut gcol, [cols, 1]),
    );
    let plane_in = g.h * g.w;
    let mut gx = vec![T::ZERO; g.n * g.c_in * plane_in];
    gx.par_chunks_mut(plane_in)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (n, c) = (idx / g.c_in, idx % g.c_in);
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let src = &gcol[((c * g.k + ki) * g.k + kj) * cols + n * p..][..p];
                    for oh in 0..ho {
                        let srow = &src[oh * wo..][..wo];
                        let base = (oh * g.stride + ki) * g.w + kj;
                        if g.stride == 1 {
                            for (d, &s) in dst[base..base + wo].iter_mut().zip(srow) {
                                *d += s;
                            }
                        } else {
                            for (ow, &s) in srow.iter().enumerate() {
                                dst[base + ow * g.stride] += s;
                            }
                        }
                    }
                }
            }
        });
    gx
}

/// Gradient of `conv2d_forward` w.r.t. weight and bias.
pub fn conv2d_backward_weight<T: Real>(
    g: ConvGeom,
    gy: &[T],
    x: &[T],
    with_bias: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let kdim = g.c_in * g.k * g.k;
    let cols = g.n * p;
    let gy_cols = to_channel_major(gy, g.n, g.c_out, p);
    let col = im2col(g, x);
    let mut gw = vec![T::ZERO; g.c_out * kdim];
    T::gemm(
        g.c_out,
        cols,
        kdim,
        (&gy_cols, [cols, 1]),
        (&col, [1, cols]),
        T::ZERO,
        (&mut gw, [kdim, 1]),
    );
    let gb = with_bias.then(|| {
        gy_cols
            .chunks(cols)
            .map(|r| r.iter().copied().sum())
            .collect()
    });
    (gw, gb)
}

/// [n, c, h, w] to [n, h, w, c].
fn to_nhwc<T: Real>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for b in 0..n {
        let src = &x[b * c * hw..][..c * hw];
        let dst = &mut out[b * c * hw..][..c * hw];
        for ch in 0..c {
            for (p, &v) in src[ch * hw..][..hw].iter().enumerate() {
                dst[p * c + ch] = v;
            }
        }
    }
    out
}

/// [n, h, w, c] to [n, c, h, w].
fn to_nchw<T: Real>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for b in 0..n {
        let src = &x[b * c * hw..][..c * hw];
        let dst = &mut out[b * c * hw..][..c * hw];
        for (p, px) in src.chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                dst[ch * hw + p] = v;
            }
        }
    }
    out
}

/// Per-channel valid convolution with stride 1. `w`: [c, k, k].
/// Runs channels-last so the inner loop spans channels.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_forward<T: Real>(
    n: usize,
    c: usize,
    h: usize,
    w_: usize,
    k: usize,
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
) -> Vec<T> {
    let (ho, wo) = (h - k + 1, w_ - k + 1);
    let xt = to_nhwc(x, n, c, h * w_);
    let wt = to_nhwc(w, 1, c, k * k);
    let mut out = vec![T::ZERO; n * ho * wo * c];
    out.par_chunks_mut(ho * wo * c)
        .enumerate()
        .for_each(|(bn, dst)| {
            let src = &xt[bn * h * w_ * c..][..h * w_ * c];
            for (p, acc) in dst.chunks_exact_mut(c).enumerate() {
                let (oh, ow) = (p / wo, p % wo);
                if let Some(b) = b {
                    acc.copy_from_slice(b);
                }
                for ki in 0..k {
                    for kj in 0..k {
                        let px = &src[((oh + ki) * w_ + ow + kj) * c..][..c];
                        let wk = &wt[(ki * k + kj) * c..][..c];
                        for ((a, &xv), &wv) in acc.iter_mut().zip(px).zip(wk) {
                            *a += wv * xv;
                        }
                    }
                }
            }
        });
    to_nchw(&out, n, c, ho * wo)
}

/// Gradients of `depthwise_forward`: (input, weight, bias).
#[allow(clippy::too_many_arguments)]
pub fn depthwise_backward<T: Real>(
    n: usize,
    c: usize,
    h: usize,
    w_: usize,
    k: usize,
    gy: &[T],
    x: &[T],
    w: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ho, wo) = (h - k + 1, w_ - k + 1);
    let (plane_in, plane_out) = (h * w_ * c, ho * wo * c);
    let xt = to_nhwc(x, n, c, h * w_);
    let gt = to_nhwc(gy, n, c, ho * wo);
    let wt = to_nhwc(w, 1, c, k * k);
    let mut gxt = vec![T::ZERO; n * plane_in];
    // Per-item weight and bias gradients, summed in order afterwards.
    let mut partial = vec![T::ZERO; n * (k * k + 1) * c];
    gxt.par_chunks_mut(plane_in)
        .zip(partial.par_chunks_mut((k * k + 1) * c))
        .enumerate()
        .for_each(|(bn, (gx, part))| {
            let g = &gt[bn * plane_out..][..plane_out];
            let xs = &xt[bn * plane_in..][..plane_in];
            let (gw, gb) = part.split_at_mut(k * k * c);
            for (p, gp) in g.chunks_exact(c).enumerate() {
                let (oh, ow) = (p / wo, p % wo);
                for (a, &v) in gb.iter_mut().zip(gp) {
                    *a += v;
                }
                for ki in 0..k {
                    for kj in 0..k {
                        let at = ((oh + ki) * w_ + ow + kj) * c;
                        let tap = (ki * k + kj) * c;
                        let wk = &wt[tap..][..c];
                        for ((d, &gv), &wv) in gx[at..][..c].iter_mut().zip(gp).zip(wk) {
                            *d += wv * gv;
                        }
                        for ((d, &gv), &xv) in gw[tap..][..c].iter_mut().zip(gp).zip(&xs[at..][..c])
                        {
                            *d += gv * xv;
                        }
                    }
                }
            }
        });
    let mut total = vec![T::ZERO; (k * k + 1) * c];
    for part in partial.chunks_exact((k * k + 1) * c) {
        for (t, &v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    let gb = total.split_off(k * k * c);
    (
        to_nchw(&gxt, n, c, h * w_),
        to_nchw(&total, 1, c, k * k),
        gb,
    )
}

/// Source index along one axis for a padded coordinate. `None` means the
/// position reads zero.
#[inline]
pub fn pad_source(i: usize, pad: usize, len: usize, replicate: bool) -> Option<usize> {
    let j = i as isize - pad as isize;
    if j >= 0 && (j as usize) < len {
        Some(j as usize)
    } else if replicate {
        Some(j.clamp(0, len as isize - 1) as usize)
    } else {
        None
    }
}
