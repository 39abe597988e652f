//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] owns every value produced during one forward pass. Each
//! operation appends a node; nodes only reference earlier nodes, so insertion
//! order is a topological order and [`Graph::backward`] is a single reverse
//! sweep.

mod conv;
mod loss;
mod norm;
mod pointwise;
mod spatial;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub use conv::{conv2d_forward, conv_out_extent, depthwise_conv2d_forward};
pub use norm::RunningStats;
pub use spatial::ShiftVariant;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Depthwise { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<T>, inv_std: Vec<T> },
    Gelu { x: Var },
    Upsample2x { x: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { x: Var, scale: T },
    Sum { x: Var },
    Mean { x: Var },
    SliceChannels { x: Var, start: usize },
    Shift { x: Var, variant: ShiftVariant },
    GlobalAvgPool { x: Var },
    GroupSoftmax { x: Var, groups: usize },
    ScaleChannels { x: Var, s: Var },
    BceWithLogits { x: Var, target: Vec<T> },
    SoftDice { x: Var, target: Vec<T>, smooth: T },
    Awl { losses: Vec<Var>, sigma: Var, eps: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recorded forward computation.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    record: bool,
    bindings: Vec<(Var, ParamId)>,
    bound: Vec<Option<Var>>,
    flops: u64,
    gelu_grad_scale: T,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records operations for backward.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            bindings: Vec::new(),
            bound: Vec::new(),
            flops: 0,
            gelu_grad_scale: T::one(),
        }
    }

    /// A graph that evaluates values only; nothing requires grad.
    pub fn inference() -> Self {
        Self { record: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward floating-point operations executed so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Scales the GELU derivative in backward. Anything other than 1 produces
    /// wrong gradients; used as a negative control for gradient checks.
    pub fn set_gelu_grad_scale(&mut self, scale: T) {
        self.gelu_grad_scale = scale;
    }

    /// Inserts a leaf. Whether it accumulates a gradient follows
    /// `tensor.requires_grad()` (and is forced off in inference graphs).
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        if !self.record {
            tensor.set_requires_grad(false);
        }
        self.nodes.push(Node { value: tensor, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a constant leaf.
    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Inserts a parameter of `store` as a gradient-tracking leaf. Binding the
    /// same parameter twice returns the same node. A graph binds parameters
    /// of a single store; other trainable tensors enter through [`Graph::leaf`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let idx = id.index();
        if self.bound.len() <= idx {
            self.bound.resize(idx + 1, None);
        }
        if let Some(v) = self.bound[idx] {
            return v;
        }
        let t = store.get(id).tensor().clone().with_requires_grad(true);
        let v = self.leaf(t);
        self.bound[idx] = Some(v);
        self.bindings.push((v, id));
        v
    }

    pub fn bindings(&self) -> &[(Var, ParamId)] {
        &self.bindings
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Zeroes every leaf gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = self.record && inputs.iter().any(|&v| self.requires_grad(v));
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { value: value.with_requires_grad(tracked), op });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn add_flops(&mut self, f: u64) {
        self.flops += f;
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let dims = self.value(loss).dims();
        if dims != [1, 1, 1, 1] {
            return Err(Error::Contract(format!("backward needs a scalar loss, got dims {dims:?}")));
        }
        if !self.record {
            return Err(Error::Contract("backward on an inference graph".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.value.requires_grad() {
                continue;
            }
            let mut contribs: Vec<(Var, Vec<T>)> = Vec::new();
            let needs = |v: Var| self.nodes[v.0].value.requires_grad();
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    leaf_grads.push((i, gy));
                    continue;
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (gx, gw, gb) =
                        conv::conv2d_backward(val(*x), val(*w), &gy, *stride, *pad, needs(*x), needs(*w));
                    push_opt(&mut contribs, *x, gx);
                    push_opt(&mut contribs, *w, gw);
                    if let Some(b) = b {
                        contribs.push((*b, gb));
                    }
                }
                Op::Depthwise { x, w, b, stride, pad } => {
                    let (gx, gw, gb) = conv::depthwise_backward(val(*x), val(*w), &gy, *stride, *pad);
                    contribs.push((*x, gx));
                    contribs.push((*w, gw));
                    if let Some(b) = b {
                        contribs.push((*b, gb));
                    }
                }
                Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                    let (gx, gg, gb) = norm::batch_norm_train_backward(val(*x).dims(), val(*gamma), xhat, inv_std, &gy);
                    contribs.extend([(*x, gx), (*gamma, gg), (*beta, gb)]);
                }
                Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
                    let (gx, gg, gb) = norm::batch_norm_eval_backward(val(*x), val(*gamma), mean, inv_std, &gy);
                    contribs.extend([(*x, gx), (*gamma, gg), (*beta, gb)]);
                }
                Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std } => {
                    let (gx, gg, gb) =
                        norm::group_norm_backward(val(*x).dims(), *groups, val(*gamma), xhat, inv_std, &gy);
                    contribs.extend([(*x, gx), (*gamma, gg), (*beta, gb)]);
                }
                Op::Gelu { x } => {
                    contribs.push((*x, pointwise::gelu_backward(val(*x), &gy, self.gelu_grad_scale)));
                }
                Op::Upsample2x { x } => {
                    contribs.push((*x, spatial::upsample2x_backward(val(*x).dims(), &gy)));
                }
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) = pointwise::linear_backward(val(*x), val(*w), &gy);
                    contribs.push((*x, gx));
                    contribs.push((*w, gw));
                    if let Some(b) = b {
                        contribs.push((*b, gb));
                    }
                }
                Op::Add { a, b } => {
                    contribs.push((*a, gy.clone()));
                    contribs.push((*b, gy));
                }
                Op::Mul { a, b } => {
                    let va = val(*a).data();
                    let vb = val(*b).data();
                    contribs.push((*a, gy.iter().zip(vb).map(|(&g, &y)| g * y).collect()));
                    contribs.push((*b, gy.iter().zip(va).map(|(&g, &y)| g * y).collect()));
                }
                Op::Affine { x, scale } => {
                    contribs.push((*x, gy.iter().map(|&g| g * *scale).collect()));
                }
                Op::Sum { x } => {
                    contribs.push((*x, vec![gy[0]; val(*x).numel()]));
                }
                Op::Mean { x } => {
                    let n = val(*x).numel();
                    contribs.push((*x, vec![gy[0] / T::of(n as f64); n]));
                }
                Op::SliceChannels { x, start } => {
                    contribs
                        .push((*x, spatial::slice_channels_backward(val(*x).dims(), *start, node.value.dims(), &gy)));
                }
                Op::Shift { x, variant } => {
                    contribs.push((*x, spatial::shift_backward(val(*x).dims(), *variant, &gy)));
                }
                Op::GlobalAvgPool { x } => {
                    contribs.push((*x, spatial::global_avg_pool_backward(val(*x).dims(), &gy)));
                }
                Op::GroupSoftmax { x, groups } => {
                    contribs.push((*x, spatial::group_softmax_backward(&node.value, *groups, &gy)));
                }
                Op::ScaleChannels { x, s } => {
                    let (gx, gs) = spatial::scale_channels_backward(val(*x), val(*s), &gy);
                    contribs.push((*x, gx));
                    contribs.push((*s, gs));
                }
                Op::BceWithLogits { x, target } => {
                    contribs.push((*x, loss::bce_backward(val(*x), target, gy[0])));
                }
                Op::SoftDice { x, target, smooth } => {
                    contribs.push((*x, loss::soft_dice_backward(val(*x), target, *smooth, gy[0])));
                }
                Op::Awl { losses, sigma, eps } => {
                    let lv: Vec<T> = losses.iter().map(|&l| val(l).item()).collect();
                    let (gl, gs) = loss::awl_backward(&lv, val(*sigma).data(), *eps, gy[0]);
                    for (&l, g) in losses.iter().zip(gl) {
                        contribs.push((l, vec![g]));
                    }
                    contribs.push((*sigma, gs));
                }
            }
            for (v, g) in contribs {
                if !needs(v) {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }
}

fn push_opt<T>(out: &mut Vec<(Var, Vec<T>)>, v: Var, g: Option<Vec<T>>) {
    if let Some(g) = g {
        out.push((v, g));
    }
}
