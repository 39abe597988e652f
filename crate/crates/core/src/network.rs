//! The U-shaped network with six deeply supervised outputs.
//!
//! ```text
//! level  resolution  encoder                 decoder (bottom-up)
//!   0      H         -                       LightConv  -> head l0
//!   1      H/2       enc0 LightConv  (w0) ─► LightConv  -> head l1
//!   2      H/4       enc1 LightConv  (w1) ─► LightConv  -> head l2
//!   3      H/8       enc2 LightConv  (w2) ─► TokShift   -> head l3
//!   4      H/16      enc3 TokShiftDn (w3) ─► TokShift   -> head l4
//!   5      H/32      enc4 TokShiftDn (w4)  bottleneck   -> head l5
//! ```
//!
//! Each decoder stage upsamples the level below (bilinear x2), maps channels
//! to the level width with a 1x1 conv, adds the same-resolution encoder output
//! and applies its shape-preserving block. The decoder block at level `L`
//! has the same kind as encoder stage `L`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ShiftVariant, Var};
use crate::blocks::{ConvStage, LightConvBlock, LightConvMode, TokenizedShiftBlock};
use crate::error::{config_err, shape_err, Result};
use crate::layers::{default_gn_groups, Conv2d, Mode};
use crate::params::ParamStore;
use crate::tensor::{Dims, Scalar, Tensor};

pub const NUM_STAGES: usize = 5;
pub const NUM_LEVELS: usize = 6;
/// Total downsampling factor between the input and the bottleneck.
pub const INPUT_MULTIPLE: usize = 1 << NUM_STAGES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub stage_widths: [usize; NUM_STAGES],
    /// Leading encoder stages built from Light Conv blocks.
    pub conv_stages: usize,
    /// Trailing encoder stages built from Tokenized Shift blocks.
    pub shift_stages: usize,
    /// Group-norm group count; `None` picks 4 when divisible, else 1.
    pub gn_groups: Option<usize>,
    /// Shift variants assigned cyclically to Tokenized Shift blocks in build order.
    pub shift_variant_schedule: Vec<ShiftVariant>,
    pub seed: u64,
    /// Replace Light Conv stages with plain conv-BN-GELU stages.
    pub disable_light_conv: bool,
    /// Replace Tokenized Shift stages with plain conv-BN-GELU stages.
    pub disable_tokenized_shift: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 1,
            stage_widths: [16, 32, 128, 160, 256],
            conv_stages: 3,
            shift_stages: 2,
            gn_groups: None,
            shift_variant_schedule: vec![ShiftVariant::A, ShiftVariant::B],
            seed: 0,
            disable_light_conv: false,
            disable_tokenized_shift: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StageKind {
    LightConv,
    TokenizedShift,
    Plain,
}

impl NetworkConfig {
    fn stage_kind(&self, i: usize) -> StageKind {
        if i < self.conv_stages {
            if self.disable_light_conv {
                StageKind::Plain
            } else {
                StageKind::LightConv
            }
        } else if self.disable_tokenized_shift {
            StageKind::Plain
        } else {
            StageKind::TokenizedShift
        }
    }

    /// Channel width of the features at supervision level `level`.
    pub fn level_width(&self, level: usize) -> usize {
        if level == 0 {
            self.stage_widths[0]
        } else {
            self.stage_widths[level - 1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(config_err!("in_channels must be positive"));
        }
        if self.num_classes == 0 {
            return Err(config_err!("num_classes must be positive"));
        }
        if self.conv_stages + self.shift_stages != NUM_STAGES {
            return Err(config_err!(
                "conv_stages ({}) + shift_stages ({}) must equal {NUM_STAGES}",
                self.conv_stages,
                self.shift_stages
            ));
        }
        if self.shift_variant_schedule.is_empty() {
            return Err(config_err!("shift_variant_schedule must not be empty"));
        }
        for (i, &w) in self.stage_widths.iter().enumerate() {
            if w == 0 {
                return Err(config_err!("encoder stage {i}: width must be positive"));
            }
        }
        let check_width = |stage: String, w: usize| -> Result<()> {
            let groups = self.gn_groups.unwrap_or_else(|| default_gn_groups(w));
            if groups == 0 || !w.is_multiple_of(groups) {
                return Err(config_err!("{stage}: width {w} not divisible into {groups} norm groups"));
            }
            Ok(())
        };
        for i in 0..NUM_STAGES {
            let kind = self.stage_kind(i);
            let enc_w = self.stage_widths[i];
            let dec_w = self.level_width(i);
            if kind == StageKind::TokenizedShift {
                for (stage, w) in [(format!("encoder stage {i}"), enc_w), (format!("decoder level {i}"), dec_w)] {
                    if w % 4 != 0 {
                        return Err(config_err!(
                            "{stage}: tokenized shift width {w} must be divisible by 4 so the 3x expansion splits into 3 parts of 4 shift groups"
                        ));
                    }
                }
            }
            if kind != StageKind::Plain {
                check_width(format!("encoder stage {i}"), enc_w)?;
                check_width(format!("decoder level {i}"), dec_w)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Stage {
    LightConv(LightConvBlock),
    TokenizedShift(TokenizedShiftBlock),
    Plain(ConvStage),
}

impl Stage {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        match self {
            Stage::LightConv(b) => b.forward(g, store, x, mode),
            Stage::TokenizedShift(b) => b.forward(g, store, x),
            Stage::Plain(b) => b.forward(g, store, x, mode),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub adapt: Conv2d,
    pub block: Stage,
}

/// Logits at the six supervision levels, `levels[i]` at resolution `H / 2^i`.
#[derive(Debug, Clone)]
pub struct MultiScaleOutput {
    pub levels: Vec<Var>,
}

impl MultiScaleOutput {
    pub fn finest(&self) -> Var {
        self.levels[0]
    }
}

#[derive(Debug, Clone)]
pub struct Network<T: Scalar = f32> {
    cfg: NetworkConfig,
    encoder: Vec<Stage>,
    /// Decoder stages for levels 4, 3, 2, 1, 0 in that order.
    decoder: Vec<DecoderStage>,
    /// Supervision heads indexed by level.
    heads: Vec<Conv2d>,
    store: ParamStore<T>,
}

impl Network<f32> {
    /// Builds the network with deterministic initialization from `cfg.seed`.
    pub fn build(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let mut shift_count = 0usize;
        let mut next_variant = || {
            let v = cfg.shift_variant_schedule[shift_count % cfg.shift_variant_schedule.len()];
            shift_count += 1;
            v
        };
        let gn = cfg.gn_groups;

        let mut encoder = Vec::with_capacity(NUM_STAGES);
        let mut prev = cfg.in_channels;
        for i in 0..NUM_STAGES {
            let w = cfg.stage_widths[i];
            let name = format!("enc.{i}");
            let stage = match cfg.stage_kind(i) {
                StageKind::LightConv => Stage::LightConv(LightConvBlock::new(
                    &mut store,
                    &name,
                    prev,
                    w,
                    LightConvMode::Encoder,
                    gn,
                    &mut rng,
                )?),
                StageKind::TokenizedShift => Stage::TokenizedShift(TokenizedShiftBlock::new(
                    &mut store,
                    &name,
                    prev,
                    w,
                    true,
                    next_variant(),
                    gn,
                    &mut rng,
                )?),
                StageKind::Plain => Stage::Plain(ConvStage::new(&mut store, &name, prev, w, 2, &mut rng)?),
            };
            encoder.push(stage);
            prev = w;
        }

        let mut decoder = Vec::with_capacity(NUM_STAGES);
        for level in (0..NUM_STAGES).rev() {
            let w = cfg.level_width(level);
            let name = format!("dec.{level}");
            let adapt = Conv2d::pointwise(&mut store, &format!("{name}.adapt"), prev, w, 1, &mut rng)?;
            let block = match cfg.stage_kind(level) {
                StageKind::LightConv => Stage::LightConv(LightConvBlock::new(
                    &mut store,
                    &name,
                    w,
                    w,
                    LightConvMode::Decoder,
                    gn,
                    &mut rng,
                )?),
                StageKind::TokenizedShift => Stage::TokenizedShift(TokenizedShiftBlock::new(
                    &mut store,
                    &name,
                    w,
                    w,
                    false,
                    next_variant(),
                    gn,
                    &mut rng,
                )?),
                StageKind::Plain => Stage::Plain(ConvStage::new(&mut store, &name, w, w, 1, &mut rng)?),
            };
            decoder.push(DecoderStage { adapt, block });
            prev = w;
        }

        let mut heads = Vec::with_capacity(NUM_LEVELS);
        for level in 0..NUM_LEVELS {
            let w = if level == NUM_STAGES { cfg.stage_widths[NUM_STAGES - 1] } else { cfg.level_width(level) };
            heads.push(Conv2d::pointwise(&mut store, &format!("head.{level}"), w, cfg.num_classes, 1, &mut rng)?);
        }

        Ok(Self { cfg: cfg.clone(), encoder, decoder, heads, store })
    }
}

impl<T: Scalar> Network<T> {
    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Same architecture with parameters converted to another element type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            cfg: self.cfg.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            heads: self.heads.clone(),
            store: self.store.cast(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn check_input(&self, dims: Dims) -> Result<()> {
        let [_, c, h, w] = dims;
        if c != self.cfg.in_channels {
            return Err(shape_err!("input has {c} channels, network expects {}", self.cfg.in_channels));
        }
        if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return Err(shape_err!("input spatial dims {h}x{w} must be positive multiples of {INPUT_MULTIPLE}"));
        }
        Ok(())
    }

    /// Logits for all six levels, finest first.
    pub fn forward_multiscale(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<MultiScaleOutput> {
        Self::forward_parts(&self.encoder, &self.decoder, &self.heads, &mut self.store, g, x, mode, &self.cfg)
    }

    /// Forward pass reading parameters from an external store with the same
    /// layout (used by gradient checks, which perturb store copies).
    pub fn forward_with_store(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<MultiScaleOutput> {
        Self::forward_parts(&self.encoder, &self.decoder, &self.heads, store, g, x, mode, &self.cfg)
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_parts(
        encoder: &[Stage],
        decoder: &[DecoderStage],
        heads: &[Conv2d],
        store: &mut ParamStore<T>,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        cfg: &NetworkConfig,
    ) -> Result<MultiScaleOutput> {
        let [_, c, h, w] = g.value(x).dims();
        if c != cfg.in_channels {
            return Err(shape_err!("input has {c} channels, network expects {}", cfg.in_channels));
        }
        if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return Err(shape_err!("input spatial dims {h}x{w} must be positive multiples of {INPUT_MULTIPLE}"));
        }
        let mut skips = Vec::with_capacity(NUM_STAGES);
        let mut y = x;
        for stage in encoder {
            y = stage.forward(g, store, y, mode)?;
            skips.push(y);
        }
        let mut levels = vec![None; NUM_LEVELS];
        levels[NUM_STAGES] = Some(heads[NUM_STAGES].forward(g, store, y)?);
        for (dec, level) in decoder.iter().zip((0..NUM_STAGES).rev()) {
            let up = g.upsample2x(y);
            let mut z = dec.adapt.forward(g, store, up)?;
            if level > 0 {
                z = g.add(z, skips[level - 1])?;
            }
            y = dec.block.forward(g, store, z, mode)?;
            levels[level] = Some(heads[level].forward(g, store, y)?);
        }
        Ok(MultiScaleOutput { levels: levels.into_iter().map(|v| v.expect("every level produced")).collect() })
    }

    /// Eval-mode logits for all levels without recording a tape.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.check_input(x.dims())?;
        let mut g = Graph::inference();
        let xv = g.input(x.clone());
        let out = self.forward_multiscale(&mut g, xv, Mode::Eval)?;
        Ok(out.levels.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// `(trainable scalars, forward FLOPs)` for an input of `input_dims`.
    pub fn count_params_flops(&self, input_dims: Dims) -> Result<(usize, u64)> {
        self.check_input(input_dims)?;
        count_params_flops(&self.store, input_dims, |g, store, x| {
            self.forward_with_store(g, store, x, Mode::Eval).map(|_| ())
        })
    }
}

/// Counts the scalars in `store` and the FLOPs `run` executes on a zero input
/// of `input_dims` (eval mode, no tape). Multiply-accumulates count as two
/// FLOPs; bias adds and elementwise ops count one per output element, norms
/// seven.
pub fn count_params_flops<T: Scalar>(
    store: &ParamStore<T>,
    input_dims: Dims,
    run: impl FnOnce(&mut Graph<T>, &mut ParamStore<T>, Var) -> Result<()>,
) -> Result<(usize, u64)> {
    let mut scratch = store.clone();
    let mut g = Graph::inference();
    let x = g.input(Tensor::zeros(input_dims));
    run(&mut g, &mut scratch, x)?;
    Ok((store.num_scalars(), g.flops()))
}
