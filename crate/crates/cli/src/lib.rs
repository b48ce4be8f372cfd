//! Command-line surface: `train`, `eval`, `predict`, `explain` and `classify`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use log::LevelFilter;
use mha_unet::evaluate::{
    batch_classify, evaluate, write_classification_csv, write_per_image_csv, ClassLabel,
};
use mha_unet::export::{explain_export, predict_export};
use mha_unet::training::{train, DatasetManifest};
use mha_unet::{DType, Device, Error, MhaUnet, RunConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "mha-unet", version, about = "MHA-UNet skin lesion segmentation and EICA classification")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write checkpoints plus a per-epoch CSV log.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Write per-image metrics to this CSV file.
        #[arg(long)]
        per_image: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
    /// Write the predicted mask and probability map of one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the five per-order heatmaps and a contour overlay for one image.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth mask drawn in red on the overlay.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Lesion/no-lesion decisions for every image of a single-label manifest.
    Classify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_parser = parse_label)]
        labels: ClassLabel,
        /// Configuration file supplying the EICA thresholds.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the per-image rule report to this CSV file.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
}

fn parse_label(s: &str) -> Result<ClassLabel, String> {
    s.parse()
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::Numerical(_) | Error::Tensor(_) => EXIT_NUMERICAL,
        Error::Shape(_)
        | Error::Ingestion { .. }
        | Error::Manifest { .. }
        | Error::Checkpoint { .. }
        | Error::Data(_)
        | Error::UndefinedMetric(_)
        | Error::Io { .. } => EXIT_DATA,
    }
}

pub fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => LevelFilter::Warn,
        1 => LevelFilter::Info,
        _ => LevelFilter::Debug,
    };
    // Built from flags only; RUST_LOG is deliberately not consulted.
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();
}

fn load_model(checkpoint: &std::path::Path) -> mha_unet::Result<MhaUnet> {
    MhaUnet::load(checkpoint, None, DType::F32, &Device::Cpu)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "undefined".into())
}

pub fn run(command: Command) -> mha_unet::Result<()> {
    match command {
        Command::Train { manifest, config, out } => {
            let cfg = RunConfig::load(&config)?;
            let (h, w) = cfg.network.input_size;
            let manifest = DatasetManifest::load(&manifest)?
                .with_resize(h, w)
                .with_mask_threshold(cfg.mask_threshold);
            std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            let cfg_copy = out.join("config.txt");
            std::fs::write(&cfg_copy, cfg.to_text()).map_err(|e| Error::Io { path: cfg_copy, source: e })?;
            let network = MhaUnet::new(cfg.network.clone(), cfg.train.seed, DType::F32, &Device::Cpu)?;
            let report = train(&network, &manifest, &cfg.train, &out)?;
            println!(
                "trained {} epochs; best epoch {} (val DSC {}); checkpoint {}",
                report.records.len(),
                report.best_epoch,
                opt(report.best_val_dsc),
                report.best_checkpoint.display()
            );
        }
        Command::Eval { checkpoint, manifest, per_image, batch_size } => {
            let manifest = DatasetManifest::load(&manifest)?;
            let ev = evaluate(&checkpoint, &manifest, batch_size)?;
            let r = &ev.report;
            println!(
                "images {}  DSC {:.4}  ACC {:.4}  SE {}  SP {}",
                ev.per_image.len(),
                r.dsc,
                r.acc,
                opt(r.se),
                opt(r.sp)
            );
            if let Some(path) = per_image {
                write_per_image_csv(&ev, &path)?;
            }
        }
        Command::Predict { checkpoint, image, out } => {
            let model = load_model(&checkpoint)?;
            for f in predict_export(&model, &image, &out)? {
                println!("{}", f.display());
            }
        }
        Command::Explain { checkpoint, image, out, mask } => {
            let model = load_model(&checkpoint)?;
            for f in explain_export(&model, &image, mask.as_deref(), &out)? {
                println!("{}", f.display());
            }
        }
        Command::Classify { checkpoint, manifest, labels, config, report, batch_size } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let model = load_model(&checkpoint)?;
            let manifest = DatasetManifest::load(&manifest)?.with_mask_threshold(cfg.mask_threshold);
            let summary = batch_classify(&model, &manifest, labels, &cfg.eica, batch_size)?;
            println!(
                "images {}  {} {:.1}%",
                summary.images.len(),
                summary.rate_name(),
                summary.rate_percent()
            );
            if let Some(path) = report {
                write_classification_csv(&summary, &path)?;
            }
        }
    }
    Ok(())
}
