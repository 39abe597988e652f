use super::{Graph, Op, Var};
use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Dims, Scalar, Tensor};

/// Mutable views of a batch-norm layer's running mean and variance.
pub struct RunningStats<'a, T> {
    pub mean: &'a mut [T],
    pub var: &'a mut [T],
}

fn check_affine<T: Scalar>(c: usize, gamma: &Tensor<T>, beta: &Tensor<T>, what: &str) -> Result<()> {
    if gamma.numel() != c || beta.numel() != c {
        return Err(shape_err!(
            "{what}: gamma {:?} / beta {:?} do not match {} channels",
            gamma.dims(),
            beta.dims(),
            c
        ));
    }
    Ok(())
}

pub(super) fn batch_norm_train_backward<T: Scalar>(
    dims: Dims,
    gamma: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    gy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = dims;
    let hw = h * w;
    let m = T::of((n * hw) as f64);
    let mut gx = vec![T::zero(); xhat.len()];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
        for s in 0..n {
            let o = (s * c + ch) * hw;
            for i in o..o + hw {
                sum_g += gy[i];
                sum_gx += gy[i] * xhat[i];
            }
        }
        gg[ch] = sum_gx;
        gb[ch] = sum_g;
        let k = gamma.data()[ch] * inv_std[ch] / m;
        for s in 0..n {
            let o = (s * c + ch) * hw;
            for i in o..o + hw {
                gx[i] = k * (m * gy[i] - sum_g - xhat[i] * sum_gx);
            }
        }
    }
    (gx, gg, gb)
}

pub(super) fn batch_norm_eval_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let mut gx = vec![T::zero(); gy.len()];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let o = (s * c + ch) * hw;
            let k = gamma.data()[ch] * inv_std[ch];
            for i in o..o + hw {
                gx[i] = gy[i] * k;
                gg[ch] += gy[i] * (x.data()[i] - mean[ch]) * inv_std[ch];
                gb[ch] += gy[i];
            }
        }
    }
    (gx, gg, gb)
}

pub(super) fn group_norm_backward<T: Scalar>(
    dims: Dims,
    groups: usize,
    gamma: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    gy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = dims;
    let hw = h * w;
    let cpg = c / groups;
    let slab = cpg * hw;
    let m = T::of(slab as f64);
    let mut gx = vec![T::zero(); xhat.len()];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for s in 0..n {
        for g in 0..groups {
            let base = (s * c + g * cpg) * hw;
            let (mut sum_d, mut sum_dx) = (T::zero(), T::zero());
            for i in 0..slab {
                let ch = g * cpg + i / hw;
                let d = gy[base + i] * gamma.data()[ch];
                sum_d += d;
                sum_dx += d * xhat[base + i];
                gg[ch] += gy[base + i] * xhat[base + i];
                gb[ch] += gy[base + i];
            }
            let k = inv_std[s * groups + g] / m;
            for i in 0..slab {
                let ch = g * cpg + i / hw;
                let d = gy[base + i] * gamma.data()[ch];
                gx[base + i] = k * (m * d - sum_d - xhat[base + i] * sum_dx);
            }
        }
    }
    (gx, gg, gb)
}

impl<T: Scalar> Graph<T> {
    /// Batch normalization over `(n, h, w)` per channel.
    ///
    /// In training mode the batch statistics normalize the input and are
    /// folded into `running` with `new = (1 - momentum) * old + momentum * batch`
    /// (unbiased variance). In eval mode `running` is used as-is.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: RunningStats<'_, T>,
        training: bool,
        momentum: T,
        eps: T,
    ) -> Result<Var> {
        let xt = self.value(x);
        let [n, c, h, w] = xt.dims();
        check_affine(c, self.value(gamma), self.value(beta), "batch_norm2d")?;
        if running.mean.len() != c || running.var.len() != c {
            return Err(shape_err!("batch_norm2d running stats sized {} for {} channels", running.mean.len(), c));
        }
        let hw = h * w;
        let m = n * hw;
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let xd = xt.data();
        let mut y = vec![T::zero(); xd.len()];
        let op;
        if training {
            if m < 2 {
                return Err(shape_err!("batch_norm2d training needs batch*h*w >= 2, got {:?}", xt.dims()));
            }
            let mut xhat = vec![T::zero(); xd.len()];
            let mut inv_std = vec![T::zero(); c];
            for ch in 0..c {
                let mut sum = 0.0f64;
                for s in 0..n {
                    sum += xd[(s * c + ch) * hw..][..hw].iter().map(|v| v.f64()).sum::<f64>();
                }
                let mean = sum / m as f64;
                let mut ss = 0.0f64;
                for s in 0..n {
                    ss += xd[(s * c + ch) * hw..][..hw].iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>();
                }
                let var = ss / m as f64;
                let is = T::of(1.0 / (var + eps.f64()).sqrt());
                inv_std[ch] = is;
                let mean_t = T::of(mean);
                for s in 0..n {
                    let o = (s * c + ch) * hw;
                    for i in o..o + hw {
                        xhat[i] = (xd[i] - mean_t) * is;
                        y[i] = gd[ch] * xhat[i] + bd[ch];
                    }
                }
                let unbiased = ss / (m - 1) as f64;
                running.mean[ch] = (T::one() - momentum) * running.mean[ch] + momentum * mean_t;
                running.var[ch] = (T::one() - momentum) * running.var[ch] + momentum * T::of(unbiased);
            }
            op = Op::BatchNormTrain { x, gamma, beta, xhat, inv_std };
        } else {
            let mean = running.mean.to_vec();
            let inv_std: Vec<T> = running.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            for s in 0..n {
                for ch in 0..c {
                    let o = (s * c + ch) * hw;
                    for i in o..o + hw {
                        y[i] = gd[ch] * (xd[i] - mean[ch]) * inv_std[ch] + bd[ch];
                    }
                }
            }
            op = Op::BatchNormEval { x, gamma, beta, mean, inv_std };
        }
        let dims = xt.dims();
        self.add_flops(7 * y.len() as u64);
        Ok(self.push(Tensor::from_raw(dims, y), op, &[x, gamma, beta]))
    }

    /// Group normalization: each sample's channels are split into `groups`
    /// contiguous slabs normalized over `(channels-in-group, h, w)`.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xt = self.value(x);
        let [n, c, h, w] = xt.dims();
        if groups == 0 || c % groups != 0 {
            return Err(config_err!("group_norm: {c} channels not divisible into {groups} groups"));
        }
        check_affine(c, self.value(gamma), self.value(beta), "group_norm")?;
        let hw = h * w;
        let cpg = c / groups;
        let slab = cpg * hw;
        let xd = xt.data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut y = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); n * groups];
        for s in 0..n {
            for g in 0..groups {
                let base = (s * c + g * cpg) * hw;
                let seg = &xd[base..base + slab];
                let mean = seg.iter().map(|v| v.f64()).sum::<f64>() / slab as f64;
                let var = seg.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / slab as f64;
                let is = T::of(1.0 / (var + eps.f64()).sqrt());
                inv_std[s * groups + g] = is;
                let mean_t = T::of(mean);
                for i in 0..slab {
                    let ch = g * cpg + i / hw;
                    let xh = (seg[i] - mean_t) * is;
                    xhat[base + i] = xh;
                    y[base + i] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let dims = xt.dims();
        self.add_flops(7 * y.len() as u64);
        Ok(self.push(
            Tensor::from_raw(dims, y),
            Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std },
            &[x, gamma, beta],
        ))
    }
}
