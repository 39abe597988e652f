//! Named parameter registry.
//!
//! Layers allocate their weights here and keep only [`ParamId`] handles, so a
//! network description is independent of its element type and the whole
//! state can be enumerated by name for checkpoints and optimizers.

use std::collections::HashSet;

use rand::Rng;

use crate::autodiff::Graph;
use crate::error::{config_err, Result};
use crate::tensor::{Dims, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// A trainable tensor with a unique dotted name such as `enc.0.conv3x3.weight`.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar = f32> {
    name: String,
    tensor: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        Self { name: name.into(), tensor: tensor.with_requires_grad(true) }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<T> {
        &mut self.tensor
    }

    /// Gradient slot, or zeros if nothing has been accumulated.
    pub fn grad_or_zeros(&self) -> Vec<T> {
        self.tensor.grad().map_or_else(|| vec![T::zero(); self.tensor.numel()], <[T]>::to_vec)
    }
}

/// Non-trainable state (batch-norm running statistics).
#[derive(Debug, Clone)]
pub struct Buffer<T: Scalar = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar = f32> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    names: HashSet<String>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), buffers: Vec::new(), names: HashSet::new() }
    }

    fn claim(&mut self, name: &str) -> Result<()> {
        if !self.names.insert(name.to_string()) {
            return Err(config_err!("duplicate parameter name {name:?}"));
        }
        Ok(())
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        self.claim(&name)?;
        self.params.push(Parameter::new(name, tensor));
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        self.claim(&name)?;
        self.buffers.push(Buffer { name, tensor: tensor.with_requires_grad(false) });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].tensor
    }

    /// Two distinct buffers mutably at once.
    pub fn buffer_pair_mut(&mut self, a: BufferId, b: BufferId) -> (&mut Tensor<T>, &mut Tensor<T>) {
        assert_ne!(a.0, b.0);
        if a.0 < b.0 {
            let (lo, hi) = self.buffers.split_at_mut(b.0);
            (&mut lo[a.0].tensor, &mut hi[0].tensor)
        } else {
            let (lo, hi) = self.buffers.split_at_mut(a.0);
            (&mut hi[0].tensor, &mut lo[b.0].tensor)
        }
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Adds the gradients of every parameter bound into `g` to the store.
    pub fn accumulate_grads(&mut self, g: &Graph<T>) {
        for &(var, id) in g.bindings() {
            if let Some(grad) = g.grad(var) {
                self.params[id.0].tensor.accumulate_grad(grad);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }

    /// Element-type conversion of all parameters and buffers.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|p| Parameter::new(p.name.clone(), p.tensor.cast())).collect(),
            buffers: self.buffers.iter().map(|b| Buffer { name: b.name.clone(), tensor: b.tensor.cast() }).collect(),
            names: self.names.clone(),
        }
    }

    /// Bitwise equality of all parameter and buffer values.
    pub fn bit_eq(&self, other: &ParamStore<T>) -> bool {
        self.params.len() == other.params.len()
            && self.buffers.len() == other.buffers.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.name == b.name && a.tensor.bit_eq(&b.tensor))
            && self.buffers.iter().zip(&other.buffers).all(|(a, b)| a.name == b.name && a.tensor.bit_eq(&b.tensor))
    }
}

/// Kaiming-uniform fan-in initialization with negative slope `sqrt(5)`:
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual default for conv layers.
pub fn kaiming_uniform<T: Scalar, R: Rng>(dims: Dims, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(dims, |_| T::of(rng.random_range(-bound..bound)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn names_must_be_unique() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros([1, 1, 1, 1])).unwrap();
        assert!(s.add("a", Tensor::zeros([1, 1, 1, 1])).is_err());
        assert!(s.add_buffer("a", Tensor::zeros([1, 1, 1, 1])).is_err());
    }

    #[test]
    fn kaiming_bounds() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t: Tensor<f64> = kaiming_uniform([64, 16, 1, 1], 16, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.25));
        // Uniform on [-b, b] has variance b^2 / 3.
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64;
        assert!((var - 0.0625 / 3.0).abs() < 0.003, "{var}");
    }
}
