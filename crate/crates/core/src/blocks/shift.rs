use rand::Rng;

use crate::autodiff::{Graph, ShiftVariant, Var};
use crate::error::{config_err, shape_err, Result};
use crate::layers::{Conv2d, Linear};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// Fuses three equally shaped branches with per-channel softmax weights.
///
/// The branches are average-pooled and summed into one `c`-vector, passed
/// through `fc2(GELU(fc1(.)))` to produce `3c` logits, and normalized across
/// the three branches independently for each channel. The output is
/// `sum_k a_k * part_k` with `a_k` broadcast over space.
#[derive(Debug, Clone)]
pub struct SplitAttention {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
}

pub const SPLIT_PARTS: usize = 3;

impl SplitAttention {
    pub fn hidden_width(c: usize) -> usize {
        (c / 4).max(4)
    }

    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut R) -> Result<Self> {
        let hidden = Self::hidden_width(c);
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), c, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, SPLIT_PARTS * c, rng)?,
            channels: c,
        })
    }

    /// Returns the fused output and the `[n, 3c, 1, 1]` attention weights.
    pub fn forward_with_weights<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        parts: &[Var; SPLIT_PARTS],
    ) -> Result<(Var, Var)> {
        let dims = g.value(parts[0]).dims();
        for &p in &parts[1..] {
            if g.value(p).dims() != dims {
                return Err(shape_err!("split attention parts differ: {:?} vs {:?}", dims, g.value(p).dims()));
            }
        }
        if dims[1] != self.channels {
            return Err(shape_err!("split attention built for {} channels, got {:?}", self.channels, dims));
        }
        let pooled: Vec<Var> = parts.iter().map(|&p| g.global_avg_pool(p)).collect();
        let summed = g.add_all(&pooled)?;
        let h = self.fc1.forward(g, store, summed)?;
        let h = g.gelu(h);
        let logits = self.fc2.forward(g, store, h)?;
        let weights = g.group_softmax(logits, SPLIT_PARTS)?;
        let c = self.channels;
        let mut terms = Vec::with_capacity(SPLIT_PARTS);
        for (k, &p) in parts.iter().enumerate() {
            let a = g.slice_channels(weights, k * c, c)?;
            terms.push(g.scale_channels(p, a)?);
        }
        Ok((g.add_all(&terms)?, weights))
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        parts: &[Var; SPLIT_PARTS],
    ) -> Result<Var> {
        Ok(self.forward_with_weights(g, store, parts)?.0)
    }
}

/// Spatial Shift Block with its input residual.
///
/// The input is expanded to `3c` channels by a 1x1 conv and split into
/// thirds. The first third stays in place; the other two are shifted with the
/// two shift variants (order set by `variant`). Split attention fuses the
/// thirds back to `c` channels and the result is added to the input.
#[derive(Debug, Clone)]
pub struct SpatialShiftBlock {
    pub expand_pw: Conv2d,
    pub attn: SplitAttention,
    pub variant: ShiftVariant,
    pub channels: usize,
}

impl SpatialShiftBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        variant: ShiftVariant,
        rng: &mut R,
    ) -> Result<Self> {
        if c == 0 || !c.is_multiple_of(4) {
            return Err(config_err!(
                "{name}: shift block width {c} must be a positive multiple of 4 (3 parts x 4 shift groups)"
            ));
        }
        Ok(Self {
            expand_pw: Conv2d::pointwise(store, &format!("{name}.expand_pw"), c, SPLIT_PARTS * c, 1, rng)?,
            attn: SplitAttention::new(store, &format!("{name}.attn"), c, rng)?,
            variant,
            channels: c,
        })
    }

    /// The fused branch alone, without the residual.
    pub fn shift<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = self.channels;
        let e = self.expand_pw.forward(g, store, x)?;
        let p0 = g.slice_channels(e, 0, c)?;
        let p1 = g.slice_channels(e, c, c)?;
        let p2 = g.slice_channels(e, 2 * c, c)?;
        let p1 = g.spatial_shift(p1, self.variant)?;
        let p2 = g.spatial_shift(p2, self.variant.other())?;
        self.attn.forward(g, store, &[p0, p1, p2])
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let fused = self.shift(g, store, x)?;
        g.add(x, fused)
    }
}
