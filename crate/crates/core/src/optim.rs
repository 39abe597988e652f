//! Adam with bias correction and the cosine learning-rate schedule.

use crate::error::{config_err, shape_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;

pub const LR0: f64 = 1e-3;
pub const LR_MIN: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Adam<T: Scalar = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps.
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// One update of every parameter in `stores` (visited in order; the same
    /// sequence of stores must be passed on every call). Missing gradients
    /// count as zero. Gradients are cleared afterwards.
    pub fn step(&mut self, stores: &mut [&mut ParamStore<T>], lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(config_err!("learning rate must be finite and non-negative, got {lr}"));
        }
        for store in stores.iter() {
            for p in store.params() {
                if let Some(g) = p.tensor().grad() {
                    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                        return Err(Error::NonFinite(format!("gradient of {}[{i}]", p.name())));
                    }
                }
            }
        }
        let sizes: Vec<usize> = stores.iter().flat_map(|s| s.params().iter().map(|p| p.tensor().numel())).collect();
        if self.m.is_empty() {
            self.m = sizes.iter().map(|&n| vec![T::zero(); n]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != sizes.len() || self.m.iter().zip(&sizes).any(|(m, &n)| m.len() != n) {
            return Err(shape_err!("optimizer state does not match the parameter layout"));
        }

        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (tb1, tb2, teps) = (T::of(b1), T::of(b2), T::of(self.eps));
        let step = T::of(lr / c1);
        let inv_c2 = T::of(1.0 / c2);
        let mut k = 0;
        for store in stores.iter_mut() {
            for p in store.params_mut() {
                let grad = p.grad_or_zeros();
                let (m, v) = (&mut self.m[k], &mut self.v[k]);
                for (((w, g), mi), vi) in
                    p.tensor_mut().data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut())
                {
                    *mi = tb1 * *mi + (T::one() - tb1) * *g;
                    *vi = tb2 * *vi + (T::one() - tb2) * *g * *g;
                    *w -= step * *mi / ((*vi * inv_c2).sqrt() + teps);
                }
                k += 1;
            }
            store.zero_grads();
        }
        Ok(())
    }
}

/// `lr_min + (lr0 - lr_min)(1 + cos(pi epoch / total)) / 2`; epochs past the
/// end stay at `lr_min`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64, lr_min: f64) -> f64 {
    if total_epochs == 0 || epoch >= total_epochs {
        return lr_min;
    }
    let phase = std::f64::consts::PI * epoch as f64 / total_epochs as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + phase.cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single<T: Scalar>(value: T, grad: Option<T>) -> ParamStore<T> {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(value)).unwrap();
        if let Some(g) = grad {
            s.get_mut(id).tensor_mut().accumulate_grad(&[g]);
        }
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = single(0.0f64, Some(1.0));
        let mut opt = Adam::new();
        opt.step(&mut [&mut s], 1e-3).unwrap();
        let w = s.params()[0].tensor().item();
        // m_hat = 1, v_hat = 1: update = lr / (1 + eps).
        assert!((w + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15, "{w}");
        assert!(s.params()[0].tensor().grad().is_none());
    }

    #[test]
    fn zero_grad_leaves_param_and_counts_step() {
        let mut s = single(0.25f32, None);
        let mut opt = Adam::new();
        opt.step(&mut [&mut s], 1e-3).unwrap();
        assert_eq!(s.params()[0].tensor().item(), 0.25);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = single(0.0f32, Some(f32::NAN));
        let err = Adam::new().step(&mut [&mut s], 1e-3).unwrap_err();
        assert!(matches!(&err, Error::NonFinite(m) if m.contains('w')), "{err}");
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, LR0, LR_MIN), LR0);
        assert_eq!(cosine_lr(100, 100, LR0, LR_MIN), LR_MIN);
        assert_eq!(cosine_lr(150, 100, LR0, LR_MIN), LR_MIN);
        assert!((cosine_lr(50, 100, LR0, LR_MIN) - (LR0 + LR_MIN) / 2.0).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for e in 0..=100 {
            let lr = cosine_lr(e, 100, LR0, LR_MIN);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
