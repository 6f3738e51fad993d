//! Raw numeric kernels behind the heavier tape ops.

use rayon::prelude::*;

use super::{gemm, MatRef, Real};

/// Geometry of one 2-D convolution (cross-correlation, zero padding).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn in_sample_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_sample_len(&self) -> usize {
        self.c_out * self.out_pixels()
    }

    pub fn cols_len(&self) -> usize {
        self.patch_len() * self.out_pixels()
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.out_pixels();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.out_pixels();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_sample<T: Real>(x: &[T], g: &ConvGeom, w: &[T], bias: &[T], out: &mut [T], cols: &mut [T]) {
    im2col(x, g, cols);
    let p = g.out_pixels();
    for (co, row) in out.chunks_mut(p).enumerate() {
        row.fill(bias[co]);
    }
    gemm(
        g.c_out,
        g.patch_len(),
        p,
        MatRef::n(w),
        MatRef::n(cols),
        T::one(),
        out,
    );
}

/// Forward convolution. Returns the unfolded patches when `keep_cols`
/// is set so the backward pass can reuse them.
pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    g: &ConvGeom,
    w: &[T],
    bias: &[T],
    keep_cols: bool,
) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); g.batch * g.out_sample_len()];
    if keep_cols {
        let mut cols = vec![T::zero(); g.batch * g.cols_len()];
        out.par_chunks_mut(g.out_sample_len())
            .zip(cols.par_chunks_mut(g.cols_len()))
            .zip(x.par_chunks(g.in_sample_len()))
            .for_each(|((o, c), xs)| conv_sample(xs, g, w, bias, o, c));
        (out, cols)
    } else {
        out.par_chunks_mut(g.out_sample_len())
            .zip(x.par_chunks(g.in_sample_len()))
            .for_each_init(
                || vec![T::zero(); g.cols_len()],
                |c, (o, xs)| conv_sample(xs, g, w, bias, o, c),
            );
        (out, Vec::new())
    }
}

/// Accumulates weight and bias gradients. Sequential over the batch so the
/// summation order is fixed.
pub(crate) fn conv2d_backward_params<T: Real>(
    dout: &[T],
    cols: &[T],
    g: &ConvGeom,
    dw: &mut [T],
    dbias: &mut [T],
) {
    let p = g.out_pixels();
    for b in 0..g.batch {
        let d = &dout[b * g.out_sample_len()..(b + 1) * g.out_sample_len()];
        let c = &cols[b * g.cols_len()..(b + 1) * g.cols_len()];
        gemm(
            g.c_out,
            p,
            g.patch_len(),
            MatRef::n(d),
            MatRef::t(c),
            T::one(),
            dw,
        );
        for (co, row) in d.chunks(p).enumerate() {
            let mut s = T::zero();
            for &v in row {
                s = s + v;
            }
            dbias[co] = dbias[co] + s;
        }
    }
}

pub(crate) fn conv2d_backward_input<T: Real>(dout: &[T], w: &[T], g: &ConvGeom, dx: &mut [T]) {
    dx.par_chunks_mut(g.in_sample_len())
        .zip(dout.par_chunks(g.out_sample_len()))
        .for_each_init(
            || vec![T::zero(); g.cols_len()],
            |dcols, (dxs, d)| {
                gemm(
                    g.patch_len(),
                    g.c_out,
                    g.out_pixels(),
                    MatRef::t(w),
                    MatRef::n(d),
                    T::zero(),
                    dcols,
                );
                col2im_add(dcols, g, dxs);
            },
        );
}

/// Max pooling over `[planes, h, w]`; returns outputs and the flat input
/// index of each window's maximum (first occurrence on ties).
pub(crate) fn maxpool_forward<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>) {
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut argmax = Vec::with_capacity(planes * ho * wo);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                let mut best_v = x[best];
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        // strict comparison keeps the first maximum in scan order
                        if x[idx] > best_v {
                            best_v = x[idx];
                            best = idx;
                        }
                    }
                }
                out.push(best_v);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

/// Numerically stable log-softmax over contiguous rows of length `k`.
pub(crate) fn log_softmax_rows<T: Real>(x: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks(k).zip(out.chunks_mut(k)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for &v in row {
            sum = sum + (v - max).exp();
        }
        let lse = max + sum.ln();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = v - lse;
        }
    }
    out
}
