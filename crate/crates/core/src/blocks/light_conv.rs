use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{config_err, Result};
use crate::layers::{default_gn_groups, BatchNorm2d, Conv2d, DepthwiseConv2d, GroupNorm, Mode};
use crate::params::ParamStore;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LightConvMode {
    /// Halves spatial extent; 1x1 stride-2 projection on the skip path.
    Encoder,
    /// Keeps shape; identity skip.
    Decoder,
}

/// Light Conv Block.
///
/// ```text
/// x1 = GELU(BN(conv3x3(x)))
/// x2 = pw1(GN(depthwise3x3(x1)))
/// x3 = pw2(GELU(x2))                 pw2 has stride 2 in the encoder
/// y  = x3 + skip(x1)   (encoder)      skip is a 1x1 stride-2 conv
/// y  = x3 + x1         (decoder)
/// ```
#[derive(Debug, Clone)]
pub struct LightConvBlock {
    pub conv3x3: Conv2d,
    pub bn: BatchNorm2d,
    pub dws: DepthwiseConv2d,
    pub gn: GroupNorm,
    pub pw1: Conv2d,
    pub pw2: Conv2d,
    pub skip: Option<Conv2d>,
    pub mode: LightConvMode,
}

impl LightConvBlock {
    /// Decoder blocks must preserve width (`in_c == out_c`) so both terms of
    /// the residual sum agree.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        mode: LightConvMode,
        gn_groups: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        if mode == LightConvMode::Decoder && in_c != out_c {
            return Err(config_err!("{name}: decoder light conv block must preserve width, got {in_c} -> {out_c}"));
        }
        let stride = match mode {
            LightConvMode::Encoder => 2,
            LightConvMode::Decoder => 1,
        };
        let groups = gn_groups.unwrap_or_else(|| default_gn_groups(out_c));
        Ok(Self {
            conv3x3: Conv2d::new(store, &format!("{name}.conv3x3"), in_c, out_c, 3, 1, 1, rng)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_c)?,
            dws: DepthwiseConv2d::new(store, &format!("{name}.dws"), out_c, 3, rng)?,
            gn: GroupNorm::new(store, &format!("{name}.gn"), out_c, groups)?,
            pw1: Conv2d::pointwise(store, &format!("{name}.pw1"), out_c, out_c, 1, rng)?,
            pw2: Conv2d::pointwise(store, &format!("{name}.pw2"), out_c, out_c, stride, rng)?,
            skip: match mode {
                LightConvMode::Encoder => {
                    Some(Conv2d::pointwise(store, &format!("{name}.skip"), out_c, out_c, 2, rng)?)
                }
                LightConvMode::Decoder => None,
            },
            mode,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let c = self.conv3x3.forward(g, store, x)?;
        let c = self.bn.forward(g, store, c, mode)?;
        let x1 = g.gelu(c);
        let d = self.dws.forward(g, store, x1)?;
        let d = self.gn.forward(g, store, d)?;
        let x2 = self.pw1.forward(g, store, d)?;
        let a = g.gelu(x2);
        let x3 = self.pw2.forward(g, store, a)?;
        let residual = match &self.skip {
            Some(skip) => skip.forward(g, store, x1)?,
            None => x1,
        };
        g.add(x3, residual)
    }
}
