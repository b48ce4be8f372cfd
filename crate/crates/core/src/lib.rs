//! MHA-UNet: a UNet-style skin lesion segmenter whose deeper stages mix
//! features with several high-order attention interaction branches in
//! parallel, plus EICA, a training-free lesion/no-lesion classifier that reads
//! the per-order activation maps of the last decoder block.
//!
//! Tensors are NCHW throughout and backed by `candle`. Every block is generic
//! over the float dtype, which lets the test-suite run gradient checks in
//! `f64` against the same code paths used for `f32` training.

pub mod config;
pub mod eica;
pub mod error;
pub mod evaluate;
pub mod explain;
pub mod export;
pub mod highorder;
pub mod metrics;
pub mod mha;
pub mod network;
pub mod nn;
pub mod spectral;
pub mod training;

pub use candle_core::{DType, Device, Tensor};

pub use config::RunConfig;
pub use eica::{classify, localize, EicaConfig, Localization, QuadrantReport};
pub use evaluate::{batch_classify, evaluate, ClassLabel, Evaluation};
pub use export::explain_export;
pub use error::{Error, Result};
pub use highorder::{
    channel_schedule, GlobalLocalFilter, HaBlock, HighOrderInteraction, InteractionConfig,
    SqueezeAttention,
};
pub use metrics::{confusion, metrics, ConfusionCounts, MetricsReport};
pub use mha::{BranchActivations, Ieab, MhaBlock, VoteBlock};
pub use explain::{ExplainabilityBundle, Heatmap};
pub use network::{MhaUnet, NetworkConfig, Prediction};
pub use nn::{ParamBuilder, ParamStore};
pub use training::{
    bce_dice_loss, load_batch, lr_at, DatasetManifest, LossWeights, Split, TrainConfig,
};
