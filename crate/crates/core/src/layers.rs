//! Parameterized wrappers around the primitive graph ops.

use rand::Rng;

use crate::autodiff::{Graph, RunningStats, Var};
use crate::error::{config_err, Result};
use crate::params::{kaiming_uniform, BufferId, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

/// Training or evaluation behavior of normalization layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if in_c == 0 || out_c == 0 {
            return Err(config_err!("{name}: zero channel count ({in_c} -> {out_c})"));
        }
        let fan_in = in_c * kernel * kernel;
        let weight =
            store.add(format!("{name}.weight"), kaiming_uniform([out_c, in_c, kernel, kernel], fan_in, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_c, 1, 1, 1]))?;
        Ok(Self { weight, bias, stride, pad, in_c, out_c, kernel })
    }

    /// 1x1 convolution.
    pub fn pointwise<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(store, name, in_c, out_c, 1, stride, 0, rng)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl DepthwiseConv2d {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight =
            store.add(format!("{name}.weight"), kaiming_uniform([c, 1, kernel, kernel], kernel * kernel, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([c, 1, 1, 1]))?;
        Ok(Self { weight, bias, stride: 1, pad: kernel / 2 })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.depthwise_conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.weight"), Tensor::ones([c, 1, 1, 1]))?,
            beta: store.add(format!("{name}.bias"), Tensor::zeros([c, 1, 1, 1]))?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros([c, 1, 1, 1]))?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones([c, 1, 1, 1]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let (mean, var) = store.buffer_pair_mut(self.running_mean, self.running_var);
        let stats = RunningStats { mean: mean.data_mut(), var: var.data_mut() };
        g.batch_norm2d(x, gamma, beta, stats, mode == Mode::Train, T::of(BN_MOMENTUM), T::of(NORM_EPS))
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, groups: usize) -> Result<Self> {
        if groups == 0 || !c.is_multiple_of(groups) {
            return Err(config_err!("{name}: {c} channels not divisible into {groups} groups"));
        }
        Ok(Self {
            gamma: store.add(format!("{name}.weight"), Tensor::ones([c, 1, 1, 1]))?,
            beta: store.add(format!("{name}.bias"), Tensor::zeros([c, 1, 1, 1]))?,
            groups,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.group_norm(x, self.groups, gamma, beta, T::of(NORM_EPS))
    }
}

/// Default group count: 4 when it divides the channel count, otherwise 1.
pub fn default_gn_groups(c: usize) -> usize {
    if c.is_multiple_of(4) {
        4
    } else {
        1
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fin: usize,
        fout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), kaiming_uniform([fout, fin, 1, 1], fin, rng))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros([fout, 1, 1, 1]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}
