//! Data-movement ops: spatial shifts, channel slicing, resampling, pooling
//! and the per-channel reweighting used by split attention.

use super::{Graph, Op, Var};
use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Dims, Scalar, Tensor};

/// Which of the two spatial-shift patterns to apply.
///
/// Channels are split into four equal quarters. Variant `A` moves quarter 0
/// down and quarter 1 up along height, then quarter 2 right and quarter 3 left
/// along width. Variant `B` applies the same four moves with the axes
/// exchanged: quarters 0/1 along width, quarters 2/3 along height. Every moved
/// value is read from the unshifted input; the line a shift vacates keeps its
/// original value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftVariant {
    A,
    B,
}

impl ShiftVariant {
    pub fn other(self) -> Self {
        match self {
            ShiftVariant::A => ShiftVariant::B,
            ShiftVariant::B => ShiftVariant::A,
        }
    }
}

#[inline]
fn back(i: usize) -> usize {
    i.saturating_sub(1)
}

#[inline]
fn fwd(i: usize, n: usize) -> usize {
    if i + 1 < n {
        i + 1
    } else {
        i
    }
}

/// Source `(row, col)` read by output position `(i, j)` in channel quarter `q`.
#[inline]
fn shift_source(variant: ShiftVariant, q: usize, i: usize, j: usize, h: usize, w: usize) -> (usize, usize) {
    match (variant, q) {
        (ShiftVariant::A, 0) | (ShiftVariant::B, 2) => (back(i), j),
        (ShiftVariant::A, 1) | (ShiftVariant::B, 3) => (fwd(i, h), j),
        (ShiftVariant::A, 2) | (ShiftVariant::B, 0) => (i, back(j)),
        _ => (i, fwd(j, w)),
    }
}

fn shift_map(dims: Dims, variant: ShiftVariant, mut visit: impl FnMut(usize, usize)) {
    let [n, c, h, w] = dims;
    let quarter = c / 4;
    for s in 0..n {
        for ch in 0..c {
            let q = ch / quarter;
            let base = (s * c + ch) * h * w;
            for i in 0..h {
                for j in 0..w {
                    let (si, sj) = shift_source(variant, q, i, j, h, w);
                    visit(base + i * w + j, base + si * w + sj);
                }
            }
        }
    }
}

pub(super) fn shift_backward<T: Scalar>(dims: Dims, variant: ShiftVariant, gy: &[T]) -> Vec<T> {
    let mut gx = vec![T::zero(); gy.len()];
    shift_map(dims, variant, |dst, src| gx[src] += gy[dst]);
    gx
}

/// Per-axis interpolation taps for 2x bilinear upsampling, half-pixel centers.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|d| {
            let src = ((d as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(super) fn upsample2x_backward<T: Scalar>(dims: Dims, gy: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let (th, tw) = (upsample_taps(h), upsample_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut gx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let src = &mut gx[p * h * w..(p + 1) * h * w];
        let g = &gy[p * oh * ow..(p + 1) * oh * ow];
        for (y, &(y0, y1, ly)) in th.iter().enumerate() {
            for (x, &(x0, x1, lx)) in tw.iter().enumerate() {
                let v = g[y * ow + x];
                let (ly, lx) = (T::of(ly), T::of(lx));
                let (my, mx) = (T::one() - ly, T::one() - lx);
                src[y0 * w + x0] += v * my * mx;
                src[y0 * w + x1] += v * my * lx;
                src[y1 * w + x0] += v * ly * mx;
                src[y1 * w + x1] += v * ly * lx;
            }
        }
    }
    gx
}

pub(super) fn slice_channels_backward<T: Scalar>(in_dims: Dims, start: usize, out_dims: Dims, gy: &[T]) -> Vec<T> {
    let [n, c, h, w] = in_dims;
    let len = out_dims[1];
    let hw = h * w;
    let mut gx = vec![T::zero(); n * c * hw];
    for s in 0..n {
        let dst = &mut gx[(s * c + start) * hw..(s * c + start + len) * hw];
        dst.copy_from_slice(&gy[s * len * hw..(s + 1) * len * hw]);
    }
    gx
}

pub(super) fn global_avg_pool_backward<T: Scalar>(dims: Dims, gy: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let hw = h * w;
    let inv = T::of(1.0 / hw as f64);
    let mut gx = Vec::with_capacity(n * c * hw);
    for &g in &gy[..n * c] {
        gx.extend(std::iter::repeat_n(g * inv, hw));
    }
    gx
}

pub(super) fn group_softmax_backward<T: Scalar>(y: &Tensor<T>, groups: usize, gy: &[T]) -> Vec<T> {
    let [n, gc, _, _] = y.dims();
    let c = gc / groups;
    let yd = y.data();
    let mut gx = vec![T::zero(); yd.len()];
    for s in 0..n {
        for ch in 0..c {
            let idx = |g: usize| s * gc + g * c + ch;
            let dot: T = (0..groups).map(|g| yd[idx(g)] * gy[idx(g)]).sum();
            for g in 0..groups {
                gx[idx(g)] = yd[idx(g)] * (gy[idx(g)] - dot);
            }
        }
    }
    gx
}

#[allow(clippy::needless_range_loop)]
pub(super) fn scale_channels_backward<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>, gy: &[T]) -> (Vec<T>, Vec<T>) {
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let mut gx = vec![T::zero(); gy.len()];
    let mut gs = vec![T::zero(); n * c];
    for p in 0..n * c {
        let sv = s.data()[p];
        let mut acc = T::zero();
        for i in p * hw..(p + 1) * hw {
            gx[i] = gy[i] * sv;
            acc += gy[i] * x.data()[i];
        }
        gs[p] = acc;
    }
    (gx, gs)
}

impl<T: Scalar> Graph<T> {
    /// Parameter-free spatial shift of channel quarters; see [`ShiftVariant`].
    pub fn spatial_shift(&mut self, x: Var, variant: ShiftVariant) -> Result<Var> {
        let xt = self.value(x);
        let dims = xt.dims();
        if !dims[1].is_multiple_of(4) {
            return Err(config_err!("spatial shift needs channels divisible by 4, got {}", dims[1]));
        }
        let mut y = vec![T::zero(); xt.numel()];
        let xd = xt.data();
        shift_map(dims, variant, |dst, src| y[dst] = xd[src]);
        Ok(self.push(Tensor::from_raw(dims, y), Op::Shift { x, variant }, &[x]))
    }

    /// Bilinear 2x upsampling with half-pixel centers (align-corners off).
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let [n, c, h, w] = xt.dims();
        let (th, tw) = (upsample_taps(h), upsample_taps(w));
        let (oh, ow) = (2 * h, 2 * w);
        let mut y = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let src = &xt.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut y[p * oh * ow..(p + 1) * oh * ow];
            for (yy, &(y0, y1, ly)) in th.iter().enumerate() {
                for (xx, &(x0, x1, lx)) in tw.iter().enumerate() {
                    let top = src[y0 * w + x0].f64() * (1.0 - lx) + src[y0 * w + x1].f64() * lx;
                    let bot = src[y1 * w + x0].f64() * (1.0 - lx) + src[y1 * w + x1].f64() * lx;
                    dst[yy * ow + xx] = T::of(top * (1.0 - ly) + bot * ly);
                }
            }
        }
        self.add_flops(7 * y.len() as u64);
        self.push(Tensor::from_raw([n, c, oh, ow], y), Op::Upsample2x { x }, &[x])
    }

    /// Channels `[start, start + len)`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        let [n, c, h, w] = xt.dims();
        if start + len > c || len == 0 {
            return Err(shape_err!("slice_channels {start}+{len} out of {c} channels"));
        }
        let hw = h * w;
        let mut y = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            y.extend_from_slice(&xt.data()[(s * c + start) * hw..(s * c + start + len) * hw]);
        }
        Ok(self.push(Tensor::from_raw([n, len, h, w], y), Op::SliceChannels { x, start }, &[x]))
    }

    /// Mean over `(h, w)`: `[n, c, h, w] -> [n, c, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let [n, c, h, w] = xt.dims();
        let hw = h * w;
        let y: Vec<T> = (0..n * c)
            .map(|p| T::of(xt.data()[p * hw..(p + 1) * hw].iter().map(|v| v.f64()).sum::<f64>() / hw as f64))
            .collect();
        self.add_flops(xt.numel() as u64);
        self.push(Tensor::from_raw([n, c, 1, 1], y), Op::GlobalAvgPool { x }, &[x])
    }

    /// Softmax across `groups` channel blocks: for `[n, groups*c, 1, 1]`,
    /// entries `g*c + ch` for fixed `(n, ch)` are normalized together.
    pub fn group_softmax(&mut self, x: Var, groups: usize) -> Result<Var> {
        let xt = self.value(x);
        let [n, gc, h, w] = xt.dims();
        if h != 1 || w != 1 || groups == 0 || gc % groups != 0 {
            return Err(shape_err!("group_softmax: dims {:?} with {groups} groups", xt.dims()));
        }
        let c = gc / groups;
        let xd = xt.data();
        let mut y = vec![T::zero(); xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let idx = |g: usize| s * gc + g * c + ch;
                let m = (0..groups).map(|g| xd[idx(g)]).fold(T::neg_infinity(), T::max);
                let z: T = (0..groups).map(|g| (xd[idx(g)] - m).exp()).sum();
                for g in 0..groups {
                    y[idx(g)] = (xd[idx(g)] - m).exp() / z;
                }
            }
        }
        let dims = xt.dims();
        self.add_flops(3 * y.len() as u64);
        Ok(self.push(Tensor::from_raw(dims, y), Op::GroupSoftmax { x, groups }, &[x]))
    }

    /// `x[n, c, :, :] * s[n, c]`, broadcasting `s` of dims `[n, c, 1, 1]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xt, st) = (self.value(x), self.value(s));
        let [n, c, h, w] = xt.dims();
        if st.dims() != [n, c, 1, 1] {
            return Err(shape_err!("scale_channels: scale {:?} for input {:?}", st.dims(), xt.dims()));
        }
        let hw = h * w;
        let mut y = Vec::with_capacity(xt.numel());
        for p in 0..n * c {
            let sv = st.data()[p];
            y.extend(xt.data()[p * hw..(p + 1) * hw].iter().map(|&v| v * sv));
        }
        let dims = xt.dims();
        self.add_flops(y.len() as u64);
        Ok(self.push(Tensor::from_raw(dims, y), Op::ScaleChannels { x, s }, &[x, s]))
    }
}
