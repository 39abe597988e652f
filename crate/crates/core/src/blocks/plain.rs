use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::layers::{BatchNorm2d, Conv2d, Mode};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// `GELU(BN(conv3x3(x)))`; stands in for a novel block in ablation runs.
#[derive(Debug, Clone)]
pub struct ConvStage {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvStage {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv3x3"), in_c, out_c, 3, stride, 1, rng)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_c)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y, mode)?;
        Ok(g.gelu(y))
    }
}
