//! Run configuration document (JSON).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ShiftVariant;
use crate::error::{config_err, Error, Result};
use crate::loss::LossKind;
use crate::metrics::{LabelMode, Pooling};
use crate::network::{NetworkConfig, NUM_LEVELS, NUM_STAGES};
use crate::optim::{LR0, LR_MIN};

pub const DEFAULT_EPOCHS: usize = 100;
pub const DEFAULT_BATCH_SIZE: usize = 16;

/// Every field is optional in the document; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub stage_widths: [usize; NUM_STAGES],
    pub conv_stages: usize,
    pub shift_stages: usize,
    pub gn_groups: Option<usize>,
    pub shift_variant_schedule: Vec<ShiftVariant>,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    /// Loss used at every level unless `level_losses` overrides it.
    pub loss: LossKind,
    pub level_losses: Option<[LossKind; NUM_LEVELS]>,
    pub label_mode: LabelMode,
    pub pooling: Pooling,
    /// Freeze every `sigma_i` at 1 (plain averaged deep supervision).
    pub disable_awl: bool,
    pub disable_light_conv: bool,
    pub disable_tokenized_shift: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = NetworkConfig::default();
        Self {
            in_channels: net.in_channels,
            num_classes: net.num_classes,
            stage_widths: net.stage_widths,
            conv_stages: net.conv_stages,
            shift_stages: net.shift_stages,
            gn_groups: net.gn_groups,
            shift_variant_schedule: net.shift_variant_schedule,
            seed: net.seed,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            lr: LR0,
            lr_min: LR_MIN,
            loss: LossKind::Composite,
            level_losses: None,
            label_mode: LabelMode::MultiLabel,
            pooling: Pooling::Dataset,
            disable_awl: false,
            disable_light_conv: false,
            disable_tokenized_shift: false,
        }
    }
}

impl RunConfig {
    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            in_channels: self.in_channels,
            num_classes: self.num_classes,
            stage_widths: self.stage_widths,
            conv_stages: self.conv_stages,
            shift_stages: self.shift_stages,
            gn_groups: self.gn_groups,
            shift_variant_schedule: self.shift_variant_schedule.clone(),
            seed: self.seed,
            disable_light_conv: self.disable_light_conv,
            disable_tokenized_shift: self.disable_tokenized_shift,
        }
    }

    pub fn level_kinds(&self) -> [LossKind; NUM_LEVELS] {
        self.level_losses.unwrap_or([self.loss; NUM_LEVELS])
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(config_err!("epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(config_err!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(self.lr_min.is_finite() && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(config_err!("lr_min must lie in [0, lr], got {}", self.lr_min));
        }
        self.network().validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| config_err!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Reads, defaults and validates a JSON run configuration.
pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_json(&text).map_err(|e| match e {
        Error::Config(m) => config_err!("{}: {m}", path.display()),
        other => other,
    })
}
