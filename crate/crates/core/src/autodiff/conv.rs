//! Dense and depthwise 2-D convolution (cross-correlation, zero padding).
//!
//! Dense convolution lowers each sample to a column matrix and runs a plain
//! row-major GEMM; 1x1 stride-1 convolutions skip the lowering.

use std::borrow::Cow;

use rayon::prelude::*;

use super::{Graph, Op, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Dims, Scalar, Tensor};

/// Output extent along one axis; `None` if the kernel does not fit.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (stride > 0 && kernel <= padded).then(|| (padded - kernel) / stride + 1)
}

/// Samples per parallel task are only worth splitting above this many MACs.
const PAR_THRESHOLD: usize = 1 << 16;

struct Geometry {
    in_c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }
    fn pixels(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry) -> Vec<T> {
    let p = g.pixels();
    let mut cols = vec![T::zero(); g.patch() * p];
    for c in 0..g.in_c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let p = g.pixels();
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy * g.w + ix as usize] += cols[row + oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn columns<'a, T: Scalar>(x: &'a [T], g: &Geometry) -> Cow<'a, [T]> {
    if g.is_pointwise() {
        Cow::Borrowed(x)
    } else {
        Cow::Owned(im2col(x, g))
    }
}

fn geometry(xd: Dims, wd: Dims, stride: usize, pad: usize) -> Result<Geometry> {
    let [_, in_c, h, w] = xd;
    let [_, w_in, kh, kw] = wd;
    if in_c != w_in {
        return Err(shape_err!("conv2d input {:?} does not match weight {:?} (in_c {} vs {})", xd, wd, in_c, w_in));
    }
    let (Some(oh), Some(ow)) = (conv_out_extent(h, kh, stride, pad), conv_out_extent(w, kw, stride, pad)) else {
        return Err(shape_err!(
            "conv2d kernel {:?} does not fit input {:?} with stride {} pad {}",
            wd,
            xd,
            stride,
            pad
        ));
    };
    Ok(Geometry { in_c, h, w, kh, kw, oh, ow, stride, pad })
}

/// `y[n,o] = b[o] + sum_{c,ky,kx} w[o,c,ky,kx] * x[n,c,oy*s+ky-p,ox*s+kx-p]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = geometry(x.dims(), w.dims(), stride, pad)?;
    let out_c = w.dims()[0];
    if let Some(b) = b {
        if b.numel() != out_c {
            return Err(shape_err!("conv2d bias {:?} for {} output channels", b.dims(), out_c));
        }
    }
    let n = x.dims()[0];
    let in_per = g.in_c * g.h * g.w;
    let p = g.pixels();
    let k = g.patch();
    let wd = w.data();
    let mut out = vec![T::zero(); n * out_c * p];
    let run = |(s, y): (usize, &mut [T])| {
        let cols = columns(&x.data()[s * in_per..(s + 1) * in_per], &g);
        for o in 0..out_c {
            let row = &mut y[o * p..(o + 1) * p];
            if let Some(b) = b {
                row.fill(b.data()[o]);
            }
            let wrow = &wd[o * k..(o + 1) * k];
            for (kk, &wv) in wrow.iter().enumerate() {
                let src = &cols[kk * p..(kk + 1) * p];
                for (r, &c) in row.iter_mut().zip(src) {
                    *r += wv * c;
                }
            }
        }
    };
    if out_c * k * p >= PAR_THRESHOLD && n > 1 {
        out.par_chunks_mut(out_c * p).enumerate().for_each(run);
    } else {
        out.chunks_mut(out_c * p).enumerate().for_each(run);
    }
    Ok(Tensor::from_raw([n, out_c, g.oh, g.ow], out))
}

type Grads<T> = (Option<Vec<T>>, Option<Vec<T>>, Vec<T>);

pub(super) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &[T],
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> Grads<T> {
    let g = geometry(x.dims(), w.dims(), stride, pad).expect("validated in forward");
    let n = x.dims()[0];
    let out_c = w.dims()[0];
    let in_per = g.in_c * g.h * g.w;
    let p = g.pixels();
    let k = g.patch();
    let wd = w.data();

    let per_sample = |s: usize| -> (Vec<T>, Vec<T>, Vec<T>) {
        let gys = &gy[s * out_c * p..(s + 1) * out_c * p];
        let mut gb = vec![T::zero(); out_c];
        for o in 0..out_c {
            gb[o] = gys[o * p..(o + 1) * p].iter().copied().sum();
        }
        let mut gw = Vec::new();
        if need_w {
            gw = vec![T::zero(); out_c * k];
            let cols = columns(&x.data()[s * in_per..(s + 1) * in_per], &g);
            for o in 0..out_c {
                let grow = &gys[o * p..(o + 1) * p];
                for kk in 0..k {
                    let src = &cols[kk * p..(kk + 1) * p];
                    gw[o * k + kk] = grow.iter().zip(src).map(|(&a, &b)| a * b).sum();
                }
            }
        }
        let mut gx = Vec::new();
        if need_x {
            let mut gcols = vec![T::zero(); k * p];
            for o in 0..out_c {
                let grow = &gys[o * p..(o + 1) * p];
                for kk in 0..k {
                    let wv = wd[o * k + kk];
                    let dst = &mut gcols[kk * p..(kk + 1) * p];
                    for (d, &gv) in dst.iter_mut().zip(grow) {
                        *d += wv * gv;
                    }
                }
            }
            if g.is_pointwise() {
                gx = gcols;
            } else {
                gx = vec![T::zero(); in_per];
                col2im(&gcols, &g, &mut gx);
            }
        }
        (gx, gw, gb)
    };

    let parts: Vec<_> = if out_c * k * p >= PAR_THRESHOLD && n > 1 {
        (0..n).into_par_iter().map(per_sample).collect()
    } else {
        (0..n).map(per_sample).collect()
    };

    let mut gx = need_x.then(|| Vec::with_capacity(n * in_per));
    let mut gw = need_w.then(|| vec![T::zero(); out_c * k]);
    let mut gb = vec![T::zero(); out_c];
    for (sx, sw, sb) in parts {
        if let Some(gx) = &mut gx {
            gx.extend_from_slice(&sx);
        }
        if let Some(gw) = &mut gw {
            gw.iter_mut().zip(&sw).for_each(|(a, &b)| *a += b);
        }
        gb.iter_mut().zip(&sb).for_each(|(a, &b)| *a += b);
    }
    (gx, gw, gb)
}

fn depthwise_geometry(xd: Dims, wd: Dims, stride: usize, pad: usize) -> Result<Geometry> {
    let [_, c, h, w] = xd;
    if wd[0] != c || wd[1] != 1 {
        return Err(shape_err!("depthwise weight {:?} does not match input {:?} (need [{}, 1, kh, kw])", wd, xd, c));
    }
    let (kh, kw) = (wd[2], wd[3]);
    let (Some(oh), Some(ow)) = (conv_out_extent(h, kh, stride, pad), conv_out_extent(w, kw, stride, pad)) else {
        return Err(shape_err!("depthwise kernel {:?} does not fit input {:?}", wd, xd));
    };
    Ok(Geometry { in_c: c, h, w, kh, kw, oh, ow, stride, pad })
}

/// Per-channel convolution: output channel `c` reads only input channel `c`.
pub fn depthwise_conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = depthwise_geometry(x.dims(), w.dims(), stride, pad)?;
    if let Some(b) = b {
        if b.numel() != g.in_c {
            return Err(shape_err!("depthwise bias {:?} for {} channels", b.dims(), g.in_c));
        }
    }
    let n = x.dims()[0];
    let mut out = vec![T::zero(); n * g.in_c * g.pixels()];
    let xd = x.data();
    let wd = w.data();
    for s in 0..n {
        for c in 0..g.in_c {
            let plane = &xd[(s * g.in_c + c) * g.h * g.w..][..g.h * g.w];
            let ker = &wd[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            let bias = b.map_or(T::zero(), |b| b.data()[c]);
            let dst = &mut out[(s * g.in_c + c) * g.pixels()..][..g.pixels()];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = bias;
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                acc += ker[ky * g.kw + kx] * plane[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                    dst[oy * g.ow + ox] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_raw([n, g.in_c, g.oh, g.ow], out))
}

pub(super) fn depthwise_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &[T],
    stride: usize,
    pad: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let g = depthwise_geometry(x.dims(), w.dims(), stride, pad).expect("validated in forward");
    let n = x.dims()[0];
    let xd = x.data();
    let wd = w.data();
    let mut gx = vec![T::zero(); xd.len()];
    let mut gw = vec![T::zero(); wd.len()];
    let mut gb = vec![T::zero(); g.in_c];
    for s in 0..n {
        for c in 0..g.in_c {
            let base = (s * g.in_c + c) * g.h * g.w;
            let gys = &gy[(s * g.in_c + c) * g.pixels()..][..g.pixels()];
            let kb = c * g.kh * g.kw;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let gv = gys[oy * g.ow + ox];
                    gb[c] += gv;
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                let xi = base + iy as usize * g.w + ix as usize;
                                gw[kb + ky * g.kw + kx] += gv * xd[xi];
                                gx[xi] += gv * wd[kb + ky * g.kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

fn conv_flops(out: Dims, patch: usize, bias: bool) -> u64 {
    let outs = out.iter().product::<usize>() as u64;
    2 * outs * patch as u64 + if bias { outs } else { 0 }
}

impl<T: Scalar> Graph<T> {
    /// Dense 2-D convolution; `w` is `[out_c, in_c, kh, kw]`, `b` is `[out_c]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let y = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let wd = self.value(w).dims();
        self.add_flops(conv_flops(y.dims(), wd[1] * wd[2] * wd[3], b.is_some()));
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(y, Op::Conv2d { x, w, b, stride, pad }, &inputs))
    }

    /// Depthwise convolution; `w` is `[c, 1, kh, kw]`, `b` is `[c]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let y = depthwise_conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let wd = self.value(w).dims();
        self.add_flops(conv_flops(y.dims(), wd[2] * wd[3], b.is_some()));
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(y, Op::Depthwise { x, w, b, stride, pad }, &inputs))
    }
}
