use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::{Graph, Op, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Exact GELU: `x * Phi(x)` with `Phi` the standard normal CDF.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

pub(super) fn gelu_backward<T: Scalar>(x: &Tensor<T>, gy: &[T], scale: T) -> Vec<T> {
    x.data().iter().zip(gy).map(|(&v, &g)| g * T::of(gelu_derivative(v.f64())) * scale).collect()
}

pub(super) fn linear_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, gy: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = x.dims()[0];
    let fin = x.dims()[1];
    let fout = w.dims()[0];
    let (xd, wd) = (x.data(), w.data());
    let mut gx = vec![T::zero(); n * fin];
    let mut gw = vec![T::zero(); fout * fin];
    let mut gb = vec![T::zero(); fout];
    for s in 0..n {
        for o in 0..fout {
            let g = gy[s * fout + o];
            gb[o] += g;
            for i in 0..fin {
                gw[o * fin + i] += g * xd[s * fin + i];
                gx[s * fin + i] += g * wd[o * fin + i];
            }
        }
    }
    (gx, gw, gb)
}

impl<T: Scalar> Graph<T> {
    pub fn gelu(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let y: Vec<T> = xt.data().iter().map(|&v| T::of(gelu_scalar(v.f64()))).collect();
        let dims = xt.dims();
        self.add_flops(y.len() as u64);
        self.push(Tensor::from_raw(dims, y), Op::Gelu { x }, &[x])
    }

    /// Affine map on feature rows: `x` is `[n, f_in, 1, 1]`, `w` is
    /// `[f_out, f_in, 1, 1]`, `b` is `[f_out]`; result `[n, f_out, 1, 1]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        let [n, fin, xh, xw] = xt.dims();
        let [fout, win, wh, ww] = wt.dims();
        if xh != 1 || xw != 1 || wh != 1 || ww != 1 || fin != win {
            return Err(shape_err!("linear: input {:?} incompatible with weight {:?}", xt.dims(), wt.dims()));
        }
        if let Some(b) = b {
            if self.value(b).numel() != fout {
                return Err(shape_err!("linear: bias {:?} for {} outputs", self.value(b).dims(), fout));
            }
        }
        let (xd, wd) = (xt.data(), wt.data());
        let mut y = vec![T::zero(); n * fout];
        for s in 0..n {
            for o in 0..fout {
                let mut acc = b.map_or(T::zero(), |b| self.value(b).data()[o]);
                for i in 0..fin {
                    acc += wd[o * fin + i] * xd[s * fin + i];
                }
                y[s * fout + o] = acc;
            }
        }
        self.add_flops((2 * n * fin * fout + if b.is_some() { n * fout } else { 0 }) as u64);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::from_raw([n, fout, 1, 1], y), Op::Linear { x, w, b }, &inputs))
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (da, db) = (self.value(a).dims(), self.value(b).dims());
        if da != db {
            return Err(shape_err!("{what}: operand dims {da:?} and {db:?} differ"));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "add")?;
        let y: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p + q).collect();
        let dims = self.value(a).dims();
        self.add_flops(y.len() as u64);
        Ok(self.push(Tensor::from_raw(dims, y), Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "mul")?;
        let y: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p * q).collect();
        let dims = self.value(a).dims();
        self.add_flops(y.len() as u64);
        Ok(self.push(Tensor::from_raw(dims, y), Op::Mul { a, b }, &[a, b]))
    }

    /// `scale * x + shift`, elementwise with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let xt = self.value(x);
        let y: Vec<T> = xt.data().iter().map(|&v| scale * v + shift).collect();
        let dims = xt.dims();
        self.add_flops(2 * y.len() as u64);
        self.push(Tensor::from_raw(dims, y), Op::Affine { x, scale }, &[x])
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let s = T::of(xt.data().iter().map(|v| v.f64()).sum::<f64>());
        self.add_flops(xt.numel() as u64);
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// Mean of all elements as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let s = T::of(xt.data().iter().map(|v| v.f64()).sum::<f64>() / xt.numel() as f64);
        self.add_flops(xt.numel() as u64);
        self.push(Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    /// Sum of several scalars.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs.split_first().ok_or_else(|| shape_err!("add_all of nothing"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }
}
