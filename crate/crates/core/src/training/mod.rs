//! Data pipeline and training loop.

mod data;
mod loss;
mod manifest;
mod schedule;
mod trainer;

pub use data::{
    hflip, load_batch, read_sample, rotate, vflip, AugmentConfig, Batch, Interpolation, Sample,
};
pub use loss::{bce_dice_loss, bce_with_logits, soft_dice_loss, LossWeights};
pub use manifest::{DatasetManifest, ManifestEntry, Split, DEFAULT_MASK_THRESHOLD};
pub use schedule::lr_at;
pub use trainer::{train, EpochRecord, TrainConfig, TrainReport, LOG_HEADER};
