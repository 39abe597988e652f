use rand::Rng;

use super::shift::SpatialShiftBlock;
use crate::autodiff::{Graph, ShiftVariant, Var};
use crate::error::Result;
use crate::layers::{default_gn_groups, Conv2d, DepthwiseConv2d, GroupNorm};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// Overlapping 3x3 patches at stride 2 (padding 1), projected to `out_c`.
#[derive(Debug, Clone)]
pub struct OverlapPatchEmbed {
    pub conv: Conv2d,
}

impl OverlapPatchEmbed {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self { conv: Conv2d::new(store, &format!("{name}.proj"), in_c, out_c, 3, 2, 1, rng)? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.conv.forward(g, store, x)
    }
}

/// Tokenized Shift Block.
///
/// ```text
/// t  = patch_embed(x)  (down variant)  |  x
/// x1 = u + Shift(u),   u = pre_pw(t)
/// x2 = pw_gelu(GN(depthwise3x3(x1)))
/// y  = pw_out(GELU(x2)) + residual_pw(t)
/// ```
#[derive(Debug, Clone)]
pub struct TokenizedShiftBlock {
    pub patch_embed: Option<OverlapPatchEmbed>,
    pub pre_pw: Conv2d,
    pub shift: SpatialShiftBlock,
    pub dws: DepthwiseConv2d,
    pub gn: GroupNorm,
    pub pw_gelu: Conv2d,
    pub pw_out: Conv2d,
    pub residual_pw: Conv2d,
}

impl TokenizedShiftBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        downsample: bool,
        variant: ShiftVariant,
        gn_groups: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let patch_embed = if downsample {
            Some(OverlapPatchEmbed::new(store, &format!("{name}.patch_embed"), in_c, out_c, rng)?)
        } else {
            None
        };
        let t_c = if downsample { out_c } else { in_c };
        let groups = gn_groups.unwrap_or_else(|| default_gn_groups(out_c));
        Ok(Self {
            patch_embed,
            pre_pw: Conv2d::pointwise(store, &format!("{name}.pre_pw"), t_c, out_c, 1, rng)?,
            shift: SpatialShiftBlock::new(store, &format!("{name}.shift"), out_c, variant, rng)?,
            dws: DepthwiseConv2d::new(store, &format!("{name}.dws"), out_c, 3, rng)?,
            gn: GroupNorm::new(store, &format!("{name}.gn"), out_c, groups)?,
            pw_gelu: Conv2d::pointwise(store, &format!("{name}.pw_gelu"), out_c, out_c, 1, rng)?,
            pw_out: Conv2d::pointwise(store, &format!("{name}.pw_out"), out_c, out_c, 1, rng)?,
            residual_pw: Conv2d::pointwise(store, &format!("{name}.residual_pw"), t_c, out_c, 1, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let t = match &self.patch_embed {
            Some(pe) => pe.forward(g, store, x)?,
            None => x,
        };
        let u = self.pre_pw.forward(g, store, t)?;
        let x1 = self.shift.forward(g, store, u)?;
        let d = self.dws.forward(g, store, x1)?;
        let d = self.gn.forward(g, store, d)?;
        let x2 = self.pw_gelu.forward(g, store, d)?;
        let a = g.gelu(x2);
        let main = self.pw_out.forward(g, store, a)?;
        let residual = self.residual_pw.forward(g, store, t)?;
        g.add(main, residual)
    }
}
