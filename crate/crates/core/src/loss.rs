//! Multi-scale deep supervision: mask pyramid, per-level losses and the
//! learned uncertainty weighting that combines them.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::network::{MultiScaleOutput, NUM_LEVELS};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Floor applied to `sigma^2` before dividing.
pub const AWL_EPS: f64 = 1e-8;
pub const DICE_SMOOTH: f64 = 1.0;
pub const SIGMA_INIT: f64 = 1.0;

/// Ground-truth masks decimated to every supervision level, finest first.
#[derive(Debug, Clone)]
pub struct MaskPyramid<T: Scalar = f32> {
    pub masks: Vec<Tensor<T>>,
}

fn check_binary<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if let Some(i) = t.data().iter().position(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::Value(format!("{what}: element {i} is {} (expected 0 or 1)", t.data()[i])));
    }
    Ok(())
}

/// Nearest-neighbor decimation: level `i` keeps the top-left sample of every
/// `2^i x 2^i` cell.
pub fn mask_pyramid<T: Scalar>(mask: &Tensor<T>) -> Result<MaskPyramid<T>> {
    let [n, k, h, w] = mask.dims();
    let m = 1 << (NUM_LEVELS - 1);
    if h % m != 0 || w % m != 0 {
        return Err(shape_err!("mask spatial dims {h}x{w} must be multiples of {m}"));
    }
    check_binary(mask, "mask")?;
    let masks = (0..NUM_LEVELS)
        .map(|level| {
            let f = 1 << level;
            Tensor::from_fn([n, k, h / f, w / f], |[b, c, i, j]| mask.at([b, c, i * f, j * f]))
        })
        .collect();
    Ok(MaskPyramid { masks })
}

/// Loss applied at one supervision level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// `0.5 BCE + 0.5 (1 - soft Dice)`.
    #[default]
    Composite,
    Bce,
    /// `1 - soft Dice`.
    Dice,
}

pub fn level_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, mask: &Tensor<T>, kind: LossKind) -> Result<Var> {
    let half = T::of(0.5);
    match kind {
        LossKind::Bce => g.bce_with_logits(logits, mask),
        LossKind::Dice => {
            let d = g.soft_dice(logits, mask, T::of(DICE_SMOOTH))?;
            Ok(g.affine(d, -T::one(), T::one()))
        }
        LossKind::Composite => {
            let b = g.bce_with_logits(logits, mask)?;
            let d = g.soft_dice(logits, mask, T::of(DICE_SMOOTH))?;
            let b = g.affine(b, half, T::zero());
            let d = g.affine(d, -half, half);
            g.add(b, d)
        }
    }
}

/// The six learnable `sigma_i` of the weighted combination.
///
/// A frozen state keeps every `sigma_i` at its initial value and contributes
/// no trainable parameters.
#[derive(Debug, Clone)]
pub struct AwlState<T: Scalar = f32> {
    store: ParamStore<T>,
    sigma: ParamId,
    frozen: bool,
}

impl<T: Scalar> AwlState<T> {
    pub const PARAM_NAME: &'static str = "awl.sigma";

    pub fn new(frozen: bool) -> Self {
        let mut store = ParamStore::new();
        let sigma = store
            .add(Self::PARAM_NAME, Tensor::full([NUM_LEVELS, 1, 1, 1], T::of(SIGMA_INIT)))
            .expect("fresh store has no name clash");
        Self { store, sigma, frozen }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Checkpoint entry name of `sigma_i`.
    pub fn entry_name(i: usize) -> String {
        format!("{}.{i}", Self::PARAM_NAME)
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.store.get(self.sigma).tensor().data().iter().map(|v| v.f64()).collect()
    }

    pub fn set_sigma(&mut self, values: &[T]) -> Result<()> {
        if values.len() != NUM_LEVELS {
            return Err(shape_err!("expected {NUM_LEVELS} sigma values, got {}", values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sigma {values:?}")));
        }
        self.store.get_mut(self.sigma).tensor_mut().data_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// `sum_i L_i / (2 max(sigma_i^2, eps)) + sum_i ln(1 + sigma_i^2)`.
    /// Returns the combined loss and the sigma leaf (pass it to
    /// [`AwlState::accumulate_grad`] after backward).
    pub fn combine(&self, g: &mut Graph<T>, losses: &[Var]) -> Result<(Var, Var)> {
        let s = g.leaf(self.store.get(self.sigma).tensor().clone().with_requires_grad(!self.frozen));
        Ok((g.awl_combine(losses, s, T::of(AWL_EPS))?, s))
    }

    /// Adds the gradient reaching `sigma_var` to the sigma parameter.
    pub fn accumulate_grad(&mut self, g: &Graph<T>, sigma_var: Var) {
        if self.frozen {
            return;
        }
        if let Some(grad) = g.grad(sigma_var) {
            self.store.get_mut(self.sigma).tensor_mut().accumulate_grad(grad);
        }
    }

    pub fn cast<U: Scalar>(&self) -> AwlState<U> {
        AwlState { store: self.store.cast(), sigma: self.sigma, frozen: self.frozen }
    }
}

/// Per-level loss nodes and their weighted combination.
#[derive(Debug, Clone)]
pub struct DeepLoss {
    pub levels: Vec<Var>,
    pub total: Var,
    pub sigma: Var,
}

/// Builds all six level losses and the combined objective.
pub fn deep_supervision_loss<T: Scalar>(
    g: &mut Graph<T>,
    out: &MultiScaleOutput,
    pyramid: &MaskPyramid<T>,
    kinds: &[LossKind; NUM_LEVELS],
    awl: &AwlState<T>,
) -> Result<DeepLoss> {
    if out.levels.len() != NUM_LEVELS || pyramid.masks.len() != NUM_LEVELS {
        return Err(shape_err!(
            "expected {NUM_LEVELS} levels, got {} outputs and {} masks",
            out.levels.len(),
            pyramid.masks.len()
        ));
    }
    let mut levels = Vec::with_capacity(NUM_LEVELS);
    for (i, ((&logits, mask), &kind)) in out.levels.iter().zip(&pyramid.masks).zip(kinds).enumerate() {
        let l = level_loss(g, logits, mask, kind).map_err(|e| match e {
            Error::Shape(m) => shape_err!("level {i}: {m}"),
            other => other,
        })?;
        levels.push(l);
    }
    let (total, sigma) = awl.combine(g, &levels)?;
    Ok(DeepLoss { levels, total, sigma })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_loss(kind: LossKind, logits: Tensor<f64>, mask: &Tensor<f64>) -> f64 {
        let mut g = Graph::new();
        let x = g.input(logits);
        let l = level_loss(&mut g, x, mask, kind).unwrap();
        g.value(l).item()
    }

    #[test]
    fn pyramid_level_zero_is_identity_and_corner_survives() {
        let mut mask = Tensor::<f32>::zeros([1, 1, 64, 64]);
        mask.set([0, 0, 0, 0], 1.0);
        let p = mask_pyramid(&mask).unwrap();
        assert!(p.masks[0].bit_eq(&mask));
        for (i, m) in p.masks.iter().enumerate() {
            assert_eq!(m.dims(), [1, 1, 64 >> i, 64 >> i]);
            assert_eq!(m.at([0, 0, 0, 0]), 1.0);
            assert_eq!(m.sum(), 1.0);
        }
    }

    #[test]
    fn pyramid_rejects_non_binary_and_bad_dims() {
        let m = Tensor::<f32>::full([1, 1, 32, 32], 0.5);
        assert!(matches!(mask_pyramid(&m), Err(Error::Value(_))));
        let m = Tensor::<f32>::zeros([1, 1, 48, 32]);
        assert!(matches!(mask_pyramid(&m), Err(Error::Shape(_))));
    }

    #[test]
    fn saturated_correct_prediction_has_near_zero_loss() {
        let mask = Tensor::from_fn([2, 2, 4, 4], |[b, c, i, j]| ((b + c + i + j) % 2) as f64);
        let logits = Tensor::from_fn(mask.dims(), |idx| if mask.at(idx) == 1.0 { 40.0 } else { -40.0 });
        let l = scalar_loss(LossKind::Composite, logits, &mask);
        assert!((0.0..1e-3).contains(&l), "{l}");
    }

    #[test]
    fn zero_logits_balanced_mask_matches_closed_form() {
        let mask = Tensor::from_fn([1, 1, 4, 4], |[_, _, i, _]| (i < 2) as u8 as f64);
        let l = scalar_loss(LossKind::Composite, Tensor::zeros([1, 1, 4, 4]), &mask);
        // p = 1/2 everywhere: sum(p t) = 4, sum p + sum t = 16.
        let dice = (2.0 * 4.0 + 1.0) / (16.0 + 1.0);
        let expected = 0.5 * std::f64::consts::LN_2 + 0.5 * (1.0 - dice);
        assert!((l - expected).abs() < 1e-12, "{l} vs {expected}");
    }

    #[test]
    fn loss_kinds_select_terms() {
        let mask = Tensor::from_fn([1, 1, 2, 2], |[_, _, i, j]| ((i + j) % 2) as f64);
        let logits = Tensor::from_fn([1, 1, 2, 2], |[_, _, i, j]| i as f64 - 0.5 * j as f64);
        let c = scalar_loss(LossKind::Composite, logits.clone(), &mask);
        let b = scalar_loss(LossKind::Bce, logits.clone(), &mask);
        let d = scalar_loss(LossKind::Dice, logits, &mask);
        assert!((c - 0.5 * (b + d)).abs() < 1e-12);
    }

    #[test]
    fn awl_sigma_one_is_half_sum_plus_constant() {
        let mut g = Graph::<f64>::new();
        let ls: Vec<Var> = (0..6).map(|i| g.input(Tensor::scalar(0.3 * i as f64 + 0.1))).collect();
        let awl = AwlState::<f64>::new(false);
        let (total, _) = awl.combine(&mut g, &ls).unwrap();
        let sum: f64 = (0..6).map(|i| 0.3 * i as f64 + 0.1).sum();
        assert!((g.value(total).item() - (0.5 * sum + 6.0 * std::f64::consts::LN_2)).abs() < 1e-12);
    }

    #[test]
    fn frozen_awl_has_no_gradient_binding() {
        let mut g = Graph::<f64>::new();
        let ls: Vec<Var> = (0..6).map(|_| g.leaf(Tensor::scalar(1.0).with_requires_grad(true))).collect();
        let mut awl = AwlState::<f64>::new(true);
        let (total, s) = awl.combine(&mut g, &ls).unwrap();
        g.backward(total).unwrap();
        awl.accumulate_grad(&g, s);
        assert!(awl.store().params()[0].tensor().grad().is_none());
        assert_eq!(g.grad(ls[0]).unwrap()[0], 0.5);
    }

    #[test]
    fn awl_non_finite_loss_names_level() {
        let mut g = Graph::<f64>::new();
        let ls: Vec<Var> = (0..6)
            .map(|i| g.input(Tensor::from_raw([1, 1, 1, 1], vec![if i == 4 { f64::NAN } else { 1.0 }])))
            .collect();
        let err = AwlState::<f64>::new(false).combine(&mut g, &ls).unwrap_err();
        assert!(matches!(&err, Error::NonFinite(m) if m.contains("level 4")), "{err}");
    }
}
