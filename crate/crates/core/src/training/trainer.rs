use std::path::{Path, PathBuf};

use candle_core::DType;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evaluate::evaluate_split;
use crate::metrics::MetricsReport;
use crate::network::{Ctx, MhaUnet};
use crate::training::data::{load_batch, AugmentConfig};
use crate::training::loss::{bce_dice_loss, scalar, LossWeights};
use crate::training::manifest::{DatasetManifest, Split};
use crate::training::schedule::lr_at;

pub const LOG_HEADER: [&str; 7] = ["epoch", "loss", "val_dsc", "val_se", "val_sp", "val_acc", "lr"];

const SHUFFLE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// `None` disables augmentation.
    pub augmentation: Option<AugmentConfig>,
    pub loss: LossWeights,
    /// Stop once validation DSC reaches this value.
    pub stop_at_val_dsc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            batch_size: 8,
            lr_init: 1e-3,
            lr_min: 1e-5,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            augmentation: Some(AugmentConfig::default()),
            loss: LossWeights::default(),
            stop_at_val_dsc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_min >= 0.0 && self.lr_min < self.lr_init && self.lr_init.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 <= lr_min < lr_init, got lr_min={} lr_init={}",
                self.lr_min, self.lr_init
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        self.loss.validate()
    }

    fn optimizer_params(&self, lr: f64) -> ParamsAdamW {
        ParamsAdamW {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean training loss.
    pub loss: f64,
    /// `None` when the manifest has no validation split.
    pub val: Option<MetricsReport>,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    /// Epoch whose weights are in `best_checkpoint`.
    pub best_epoch: usize,
    pub best_val_dsc: Option<f64>,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log: PathBuf,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Trains `network` in place on the train split, validating every epoch.
///
/// Writes `best.safetensors` (highest validation DSC, or the last epoch when
/// there is no validation split), `last.safetensors` and `train_log.csv`
/// into `out_dir`.
pub fn train(network: &MhaUnet, manifest: &DatasetManifest, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    let size = network.config().input_size;
    if manifest.resize_to != size {
        return Err(Error::Config(format!(
            "manifest resizes to {:?} but the network expects {:?}",
            manifest.resize_to, size
        )));
    }
    let n_train = manifest.split(Split::Train).len();
    if n_train == 0 {
        return Err(Error::Data("train split is empty".into()));
    }
    let has_val = !manifest.split(Split::Val).is_empty();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let best_checkpoint = out_dir.join("best.safetensors");
    let last_checkpoint = out_dir.join("last.safetensors");
    let log_path = out_dir.join("train_log.csv");
    let mut log = csv::Writer::from_path(&log_path).map_err(|e| Error::ingestion(&log_path, e))?;
    let log_err = |e: csv::Error| Error::ingestion(&log_path, e);
    log.write_record(LOG_HEADER).map_err(log_err)?;

    let rng_for = |stream: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(stream);
        r
    };
    let mut shuffle_rng = rng_for(SHUFFLE_STREAM);
    let mut augment_rng = rng_for(AUGMENT_STREAM);
    let mut dropout_rng = rng_for(DROPOUT_STREAM);

    let device = network.params().trainable().first().map(|v| v.device().clone()).unwrap_or(candle_core::Device::Cpu);
    let dtype = network.params().trainable().first().map(|v| v.dtype()).unwrap_or(DType::F32);
    let mut opt = AdamW::new(network.params().trainable(), cfg.optimizer_params(cfg.lr_init))?;

    let mut order: Vec<usize> = (0..n_train).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut best_epoch = 0;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg)?;
        opt.set_learning_rate(lr);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = load_batch(
                manifest,
                Split::Train,
                chunk,
                cfg.augmentation.as_ref().map(|a| (a, &mut augment_rng)),
                &device,
            )?;
            let masks = batch
                .masks
                .ok_or_else(|| Error::Data("train batch without masks".into()))?
                .to_dtype(dtype)?;
            let images = batch.images.to_dtype(dtype)?;
            let out = network.forward(&images, &mut Ctx::train(&mut dropout_rng))?;
            let loss = bce_dice_loss(&out.logits, &masks, &cfg.loss)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss is {value} at epoch {epoch}, batch {bi} (images {:?})",
                    batch.names
                )));
            }
            opt.backward_step(&loss)?;
            loss_sum += value * chunk.len() as f64;
        }
        let loss = loss_sum / n_train as f64;
        let val = if has_val {
            Some(evaluate_split(network, manifest, Split::Val, cfg.batch_size)?.report)
        } else {
            None
        };
        log::info!(
            "epoch {epoch}: loss {loss:.5}, val dsc {}, lr {lr:.3e}",
            fmt_opt(val.as_ref().map(|v| v.dsc))
        );
        log.write_record([
            epoch.to_string(),
            loss.to_string(),
            fmt_opt(val.as_ref().map(|v| v.dsc)),
            fmt_opt(val.as_ref().and_then(|v| v.se)),
            fmt_opt(val.as_ref().and_then(|v| v.sp)),
            fmt_opt(val.as_ref().map(|v| v.acc)),
            lr.to_string(),
        ])
        .map_err(log_err)?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;

        let improved = match (&val, best) {
            (Some(v), Some((_, d))) => v.dsc > d,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            network.save(&best_checkpoint)?;
            best_epoch = epoch;
            if let Some(v) = &val {
                best = Some((epoch, v.dsc));
            }
        }
        let stop = match (cfg.stop_at_val_dsc, &val) {
            (Some(target), Some(v)) => v.dsc >= target,
            _ => false,
        };
        records.push(EpochRecord { epoch, loss, val, lr });
        if stop {
            log::info!("validation DSC target reached at epoch {epoch}");
            break;
        }
    }
    network.save(&last_checkpoint)?;
    Ok(TrainReport {
        records,
        best_epoch,
        best_val_dsc: best.map(|(_, d)| d),
        best_checkpoint,
        last_checkpoint,
        log: log_path,
    })
}
