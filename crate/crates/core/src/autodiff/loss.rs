use super::{Graph, Op, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(super) fn bce_backward<T: Scalar>(x: &Tensor<T>, target: &[T], gy: T) -> Vec<T> {
    let scale = gy.f64() / x.numel() as f64;
    x.data().iter().zip(target).map(|(&v, &t)| T::of((sigmoid(v.f64()) - t.f64()) * scale)).collect()
}

/// Per-(sample, channel) sums for soft Dice: (sum p*t, sum p + sum t).
fn dice_slabs<T: Scalar>(x: &Tensor<T>, target: &[T]) -> Vec<(f64, f64)> {
    let [n, k, h, w] = x.dims();
    let hw = h * w;
    (0..n * k)
        .map(|p| {
            let (mut inter, mut total) = (0.0, 0.0);
            let span = p * hw..(p + 1) * hw;
            for (xv, tv) in x.data()[span.clone()].iter().zip(&target[span]) {
                let prob = sigmoid(xv.f64());
                let t = tv.f64();
                inter += prob * t;
                total += prob + t;
            }
            (inter, total)
        })
        .collect()
}

pub(super) fn soft_dice_backward<T: Scalar>(x: &Tensor<T>, target: &[T], smooth: T, gy: T) -> Vec<T> {
    let [n, k, h, w] = x.dims();
    let hw = h * w;
    let s = smooth.f64();
    let scale = gy.f64() / (n * k) as f64;
    let mut gx = vec![T::zero(); x.numel()];
    for (p, (inter, total)) in dice_slabs(x, target).into_iter().enumerate() {
        let den = total + s;
        let num = 2.0 * inter + s;
        for i in p * hw..(p + 1) * hw {
            let prob = sigmoid(x.data()[i].f64());
            let dd_dp = (2.0 * target[i].f64() * den - num) / (den * den);
            gx[i] = T::of(scale * dd_dp * prob * (1.0 - prob));
        }
    }
    gx
}

/// `sigma^2` with the floor applied.
#[inline]
fn floored_sq(sigma: f64, eps: f64) -> (f64, bool) {
    let sq = sigma * sigma;
    if sq > eps {
        (sq, true)
    } else {
        (eps, false)
    }
}

pub(super) fn awl_backward<T: Scalar>(losses: &[T], sigma: &[T], eps: T, gy: T) -> (Vec<T>, Vec<T>) {
    let g = gy.f64();
    let mut gl = Vec::with_capacity(losses.len());
    let mut gs = Vec::with_capacity(sigma.len());
    for (&l, &s) in losses.iter().zip(sigma) {
        let (l, s) = (l.f64(), s.f64());
        let (q, active) = floored_sq(s, eps.f64());
        gl.push(T::of(g / (2.0 * q)));
        let data_term = if active { -l * s / (q * q) } else { 0.0 };
        gs.push(T::of(g * (data_term + 2.0 * s / (1.0 + s * s))));
    }
    (gl, gs)
}

impl<T: Scalar> Graph<T> {
    fn check_target(&self, x: Var, target: &Tensor<T>, what: &str) -> Result<()> {
        if self.value(x).dims() != target.dims() {
            return Err(shape_err!("{what}: logits {:?} vs target {:?}", self.value(x).dims(), target.dims()));
        }
        Ok(())
    }

    /// Mean binary cross-entropy between `sigmoid(x)` and `target`, computed
    /// stably from logits.
    pub fn bce_with_logits(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        self.check_target(x, target, "bce_with_logits")?;
        let xt = self.value(x);
        let total: f64 = xt
            .data()
            .iter()
            .zip(target.data())
            .map(|(&v, &t)| {
                let v = v.f64();
                v.max(0.0) - v * t.f64() + (-v.abs()).exp().ln_1p()
            })
            .sum();
        let n = xt.numel();
        self.add_flops(6 * n as u64);
        Ok(self.push(
            Tensor::scalar(T::of(total / n as f64)),
            Op::BceWithLogits { x, target: target.data().to_vec() },
            &[x],
        ))
    }

    /// Mean over `(sample, channel)` of the smoothed soft Dice coefficient
    /// `(2 sum(p t) + s) / (sum p + sum t + s)` with `p = sigmoid(x)`.
    pub fn soft_dice(&mut self, x: Var, target: &Tensor<T>, smooth: T) -> Result<Var> {
        self.check_target(x, target, "soft_dice")?;
        let xt = self.value(x);
        let s = smooth.f64();
        let slabs = dice_slabs(xt, target.data());
        let mean = slabs.iter().map(|&(i, t)| (2.0 * i + s) / (t + s)).sum::<f64>() / slabs.len() as f64;
        self.add_flops(6 * xt.numel() as u64);
        Ok(self.push(Tensor::scalar(T::of(mean)), Op::SoftDice { x, target: target.data().to_vec(), smooth }, &[x]))
    }

    /// Uncertainty-weighted combination of scalar losses:
    /// `sum_i L_i / (2 max(sigma_i^2, eps)) + sum_i ln(1 + sigma_i^2)`.
    /// `sigma` holds one entry per loss.
    pub fn awl_combine(&mut self, losses: &[Var], sigma: Var, eps: T) -> Result<Var> {
        let st = self.value(sigma);
        if st.numel() != losses.len() {
            return Err(shape_err!("awl_combine: {} losses but sigma {:?}", losses.len(), st.dims()));
        }
        let mut total = 0.0;
        for (i, (&l, &s)) in losses.iter().zip(st.data()).enumerate() {
            let lt = self.value(l);
            if !lt.is_scalar() {
                return Err(shape_err!("awl_combine: loss {i} is not scalar ({:?})", lt.dims()));
            }
            let lv = lt.item().f64();
            let s = s.f64();
            if !lv.is_finite() || !s.is_finite() {
                return Err(Error::NonFinite(format!("level {i}: loss {lv}, sigma {s}")));
            }
            let (q, _) = floored_sq(s, eps.f64());
            total += lv / (2.0 * q) + (1.0 + s * s).ln();
        }
        let mut inputs = losses.to_vec();
        inputs.push(sigma);
        Ok(self.push(Tensor::scalar(T::of(total)), Op::Awl { losses: losses.to_vec(), sigma, eps }, &inputs))
    }
}
