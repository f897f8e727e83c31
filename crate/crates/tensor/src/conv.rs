//! 2D cross-correlation. Layers with many output channels use per-sample
//! im2col + GEMM; stride-1 layers with only a few output channels use a
//! direct shift-and-accumulate loop, where im2col would be bandwidth bound.

use rayon::prelude::*;

use crate::error::{Result, TensorError};
use crate::linalg::gemm;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stride and symmetric zero padding of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv2dSpec { stride, padding }
    }

    /// Stride 1 with padding that keeps spatial size for an odd kernel.
    pub fn same(kernel: usize) -> Self {
        Conv2dSpec {
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        (self.stride > 0 && padded >= kernel).then(|| (padded - kernel) / self.stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

/// Dot product with eight independent accumulators (fixed order, so the
/// result is deterministic).
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::zero(), |acc, (&p, &q)| acc + p * q);
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    lanes.iter().fold(tail, |acc, &v| acc + v)
}

/// Output-channel count up to which stride-1 convolutions run directly.
const DIRECT_MAX_FILTERS: usize = 4;

impl Geometry {
    /// Valid output range along one axis for kernel tap `k` (stride 1).
    fn span(out: usize, input: usize, k: usize, pad: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(k);
        let hi = (input + pad).saturating_sub(k).min(out);
        (lo, hi.max(lo))
    }

    /// Calls `f(tap_row, out_offset, in_offset, len)` for every contiguous
    /// run of output/input pixels linked by kernel tap `(ki, kj)`.
    fn for_each_run(&self, ki: usize, kj: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (y0, y1) = Self::span(self.oh, self.h, ki, self.pad);
        let (x0, x1) = Self::span(self.ow, self.w, kj, self.pad);
        if x1 == x0 {
            return;
        }
        for oy in y0..y1 {
            let iy = oy + ki - self.pad;
            let ix = x0 + kj - self.pad;
            f(oy * self.ow + x0, iy * self.w + ix, x1 - x0);
        }
    }

    fn direct_forward<T: Scalar>(&self, f: usize, x: &[T], k: &[T], out: &mut [T]) {
        let (c, hw, ohw) = (self.c, self.h * self.w, self.oh * self.ow);
        for fi in 0..f {
            let dst = &mut out[fi * ohw..(fi + 1) * ohw];
            for ci in 0..c {
                let plane = &x[ci * hw..(ci + 1) * hw];
                for ki in 0..self.kh {
                    for kj in 0..self.kw {
                        let wv = k[((fi * c + ci) * self.kh + ki) * self.kw + kj];
                        self.for_each_run(ki, kj, |o, i, len| {
                            for (d, &s) in dst[o..o + len].iter_mut().zip(&plane[i..i + len]) {
                                *d = *d + wv * s;
                            }
                        });
                    }
                }
            }
        }
    }

    fn direct_backward<T: Scalar>(
        &self,
        f: usize,
        x: &[T],
        k: &[T],
        g: &[T],
        gx: Option<&mut [T]>,
        gk: Option<&mut [T]>,
    ) {
        let (c, hw, ohw) = (self.c, self.h * self.w, self.oh * self.ow);
        if let Some(gx) = gx {
            for fi in 0..f {
                let gs = &g[fi * ohw..(fi + 1) * ohw];
                for ci in 0..c {
                    let plane = &mut gx[ci * hw..(ci + 1) * hw];
                    for ki in 0..self.kh {
                        for kj in 0..self.kw {
                            let wv = k[((fi * c + ci) * self.kh + ki) * self.kw + kj];
                            self.for_each_run(ki, kj, |o, i, len| {
                                for (d, &s) in plane[i..i + len].iter_mut().zip(&gs[o..o + len]) {
                                    *d = *d + wv * s;
                                }
                            });
                        }
                    }
                }
            }
        }
        if let Some(gk) = gk {
            for fi in 0..f {
                let gs = &g[fi * ohw..(fi + 1) * ohw];
                for ci in 0..c {
                    let plane = &x[ci * hw..(ci + 1) * hw];
                    for ki in 0..self.kh {
                        for kj in 0..self.kw {
                            let mut acc = T::zero();
                            self.for_each_run(ki, kj, |o, i, len| {
                                acc = acc + dot(&gs[o..o + len], &plane[i..i + len]);
                            });
                            let idx = ((fi * c + ci) * self.kh + ki) * self.kw + kj;
                            gk[idx] = gk[idx] + acc;
                        }
                    }
                }
            }
        }
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col<T: Scalar>(&self, input: &[T], col: &mut [T]) {
        let Geometry {
            c,
            h,
            w,
            kh,
            kw,
            oh,
            ow,
            stride,
            pad,
        } = *self;
        let cols = oh * ow;
        for ci in 0..c {
            let plane = &input[ci * h * w..(ci + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            *v = if ix < 0 || ix >= w as isize {
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

    fn col2im<T: Scalar>(&self, col: &[T], out: &mut [T]) {
        let Geometry {
            c,
            h,
            w,
            kh,
            kw,
            oh,
            ow,
            stride,
            pad,
        } = *self;
        let cols = oh * ow;
        for ci in 0..c {
            let plane = &mut out[ci * h * w..(ci + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                line[ix as usize] = line[ix as usize] + src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// Cross-correlation of `self` `[N, C, H, W]` with `kernel` `[F, C, kh, kw]`,
    /// optional `bias` `[F]`, zero padding. Output `[N, F, H', W']` with
    /// `H' = (H + 2p - kh) / stride + 1`.
    pub fn conv2d(
        &self,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        spec: Conv2dSpec,
    ) -> Result<Tensor<T>> {
        let xs = self.shape();
        let ks = kernel.shape();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(TensorError::mismatch("conv2d", xs, ks));
        }
        if let Some(b) = bias {
            if b.shape() != [ks[0]] {
                return Err(TensorError::mismatch("conv2d bias", b.shape(), &ks[..1]));
            }
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ks[0], ks[2], ks[3]);
        let (oh, ow) = match (spec.output_len(h, kh), spec.output_len(w, kw)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(TensorError::invalid(
                    "conv2d",
                    format!("kernel {kh}x{kw} with {spec:?} does not fit input {h}x{w}"),
                ))
            }
        };
        let geo = Geometry {
            c,
            h,
            w,
            kh,
            kw,
            oh,
            ow,
            stride: spec.stride,
            pad: spec.padding,
        };
        let (rows, cols) = (geo.rows(), geo.cols());
        let direct = spec.stride == 1 && f <= DIRECT_MAX_FILTERS;
        let mut out = vec![T::zero(); n * f * cols];
        {
            let xd = self.data();
            let kd = kernel.data();
            let bd = bias.map(|b| b.data());
            let (xd, kd, bd) = (&xd[..], &kd[..], bd.as_deref());
            let sample = c * h * w;
            out.par_chunks_mut(f * cols).enumerate().for_each_init(
                || vec![T::zero(); if direct { 0 } else { rows * cols }],
                |col, (s, dst)| {
                    if let Some(bd) = bd {
                        for (fi, chunk) in dst.chunks_mut(cols).enumerate() {
                            chunk.iter_mut().for_each(|v| *v = bd[fi]);
                        }
                    }
                    let xs = &xd[s * sample..(s + 1) * sample];
                    if direct {
                        geo.direct_forward(f, xs, kd, dst);
                    } else {
                        geo.im2col(xs, col);
                        let beta = if bd.is_some() { T::one() } else { T::zero() };
                        gemm(f, rows, cols, kd, false, col, false, beta, dst);
                    }
                },
            );
        }

        let x = self.clone();
        let k = kernel.clone();
        let b = bias.cloned();
        let mut parents = vec![self.clone(), kernel.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            out,
            vec![n, f, oh, ow],
            parents,
            Box::new(move |g, _| {
                let xd = x.data();
                let kd = k.data();
                let want_x = x.requires_grad();
                let want_k = k.requires_grad();
                let sample = c * h * w;
                let (xd, kd) = (&xd[..], &kd[..]);
                // per-sample kernel gradients, summed afterwards in sample
                // order so the result does not depend on the thread count
                let mut gx = vec![T::zero(); if want_x { n * sample } else { 0 }];
                let mut partial = vec![T::zero(); if want_k { n * f * rows } else { 0 }];
                let gx_chunks = gx.par_chunks_mut(sample.max(1));
                let gk_chunks = partial.par_chunks_mut((f * rows).max(1));
                let work =
                    |col: &mut Vec<T>, s: usize, gxs: Option<&mut [T]>, gks: Option<&mut [T]>| {
                        let xs = &xd[s * sample..(s + 1) * sample];
                        let gs = &g[s * f * cols..(s + 1) * f * cols];
                        if direct {
                            geo.direct_backward(f, xs, kd, gs, gxs, gks);
                            return;
                        }
                        if let Some(gk) = gks {
                            geo.im2col(xs, col);
                            gemm(f, cols, rows, gs, false, col, true, T::zero(), gk);
                        }
                        if let Some(gx) = gxs {
                            gemm(rows, f, cols, kd, true, gs, false, T::zero(), col);
                            geo.col2im(col, gx);
                        }
                    };
                let init = || vec![T::zero(); if direct { 0 } else { rows * cols }];
                match (want_x, want_k) {
                    (true, true) => gx_chunks
                        .zip(gk_chunks)
                        .enumerate()
                        .for_each_init(init, |col, (s, (a, b))| work(col, s, Some(a), Some(b))),
                    (true, false) => gx_chunks
                        .enumerate()
                        .for_each_init(init, |col, (s, a)| work(col, s, Some(a), None)),
                    (false, true) => gk_chunks
                        .enumerate()
                        .for_each_init(init, |col, (s, b)| work(col, s, None, Some(b))),
                    (false, false) => {}
                }
                let gx = want_x.then_some(gx);
                let gk = want_k.then(|| {
                    let mut gk = vec![T::zero(); f * rows];
                    for p in partial.chunks(f * rows) {
                        for (a, &v) in gk.iter_mut().zip(p) {
                            *a = *a + v;
                        }
                    }
                    gk
                });
                let mut grads = vec![gx, gk];
                if let Some(b) = b.as_ref() {
                    let gb = b.requires_grad().then(|| {
                        let mut gb = vec![T::zero(); f];
                        for s in 0..n {
                            for (fi, acc) in gb.iter_mut().enumerate() {
                                let base = (s * f + fi) * cols;
                                *acc = g[base..base + cols].iter().fold(*acc, |a, &v| a + v);
                            }
                        }
                        gb
                    });
                    grads.push(gb);
                }
                grads
            }),
        ))
    }
}
