//! Lightweight U-shaped segmentation network on a small CPU tensor library.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: NCHW tensors and a tape-based reverse-mode
//!   graph with the primitive ops (convolutions, norms, GELU, shifts, losses).
//! - [`layers`] and [`blocks`]: parameterized layers and the Light Conv and
//!   Tokenized Shift blocks.
//! - [`network`]: the six-output encoder/decoder.
//! - [`loss`], [`metrics`], [`optim`], [`train`]: deep supervision with
//!   learned level weights, IoU/Dice, Adam and the training loop.
//! - [`io`], [`dataset`], [`config`]: file formats, datasets and run configs.
//! - [`gradcheck`]: finite-difference verification used by tests and the CLI.

pub mod autodiff;
pub mod blocks;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, ShiftVariant, Var};
pub use config::{load_config, RunConfig};
pub use dataset::{synth_generate, Dataset, Split, SynthOptions};
pub use error::{Error, FormatError, Result};
pub use layers::Mode;
pub use loss::{AwlState, LossKind};
pub use metrics::{LabelMode, Pooling, Scores};
pub use network::{MultiScaleOutput, Network, NetworkConfig};
pub use params::ParamStore;
pub use tensor::{Scalar, Tensor};
pub use train::Trainer;
