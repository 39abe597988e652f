//! Light Conv, Spatial Shift and Tokenized Shift blocks.
//!
//! Blocks own only parameter handles; values live in a [`ParamStore`] so the
//! same block runs in `f32` for training and `f64` under gradient checks.
//!
//! [`ParamStore`]: crate::params::ParamStore

mod light_conv;
mod plain;
mod shift;
mod tokenized;

pub use light_conv::{LightConvBlock, LightConvMode};
pub use plain::ConvStage;
pub use shift::{SpatialShiftBlock, SplitAttention};
pub use tokenized::{OverlapPatchEmbed, TokenizedShiftBlock};

#[cfg(test)]
mod tests;
