//! Checkpoint evaluation and image-level EICA classification over manifests.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};

use crate::eica::{classify, EicaConfig, QuadrantReport};
use crate::error::{Error, Result};
use crate::metrics::{confusion, metrics, ConfusionCounts, MetricsReport};
use crate::network::{MhaUnet, Prediction};
use crate::training::{load_batch, read_sample, DatasetManifest, ManifestEntry, Sample, Split};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub name: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Pooled over every pixel of the split.
    pub report: MetricsReport,
    pub per_image: Vec<ImageMetrics>,
}

fn model_device(network: &MhaUnet) -> (Device, DType) {
    network
        .params()
        .trainable()
        .first()
        .map(|v| (v.device().clone(), v.dtype()))
        .unwrap_or((Device::Cpu, DType::F32))
}

/// Eval-mode segmentation metrics on `split` at a 0.5 probability threshold.
pub fn evaluate_split(network: &MhaUnet, manifest: &DatasetManifest, split: Split, batch_size: usize) -> Result<Evaluation> {
    let n = manifest.split(split).len();
    if n == 0 {
        return Err(Error::Data(format!("the {split} split is empty")));
    }
    let (device, dtype) = model_device(network);
    let indices: Vec<usize> = (0..n).collect();
    let mut per_image = Vec::with_capacity(n);
    let mut total = ConfusionCounts::default();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = load_batch(manifest, split, chunk, None, &device)?;
        let masks = batch
            .masks
            .ok_or_else(|| Error::Data(format!("the {split} split has entries without masks")))?;
        let pred = network.predict(&batch.images.to_dtype(dtype)?)?;
        let pred = pred.mask.to_dtype(DType::F32)?;
        for (i, name) in batch.names.into_iter().enumerate() {
            let p = pred.get(i)?.flatten_all()?.to_vec1::<f32>()?;
            let t = masks.get(i)?.flatten_all()?.to_vec1::<f32>()?;
            let counts = confusion(&p, &t)?;
            total += counts;
            per_image.push(ImageMetrics {
                name,
                report: metrics(counts)?,
            });
        }
    }
    Ok(Evaluation {
        report: metrics(total)?,
        per_image,
    })
}

/// Loads `checkpoint` and evaluates it on the test split of `manifest`,
/// resizing images to the network's input size.
pub fn evaluate(checkpoint: &Path, manifest: &DatasetManifest, batch_size: usize) -> Result<Evaluation> {
    let network = MhaUnet::load(checkpoint, None, DType::F32, &Device::Cpu)?;
    let (h, w) = network.config().input_size;
    let manifest = manifest.clone().with_resize(h, w);
    evaluate_split(&network, &manifest, Split::Test, batch_size)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const PER_IMAGE_HEADER: [&str; 9] = ["image", "dsc", "acc", "se", "sp", "tp", "tn", "fp", "fn"];

pub fn write_per_image_csv(evaluation: &Evaluation, path: &Path) -> Result<()> {
    let err = |e: csv::Error| Error::ingestion(path, e);
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(PER_IMAGE_HEADER).map_err(err)?;
    for im in &evaluation.per_image {
        let r = &im.report;
        let c = r.counts;
        w.write_record([
            im.name.clone(),
            r.dsc.to_string(),
            r.acc.to_string(),
            opt(r.se),
            opt(r.sp),
            c.tp.to_string(),
            c.tn.to_string(),
            c.fp.to_string(),
            c.fn_.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Ground truth for a whole classification manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassLabel {
    Positive,
    Negative,
}

impl FromStr for ClassLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "positive" => Ok(ClassLabel::Positive),
            "negative" => Ok(ClassLabel::Negative),
            other => Err(format!("unknown label `{other}` (expected positive or negative)")),
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassLabel::Positive => "positive",
            ClassLabel::Negative => "negative",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifiedImage {
    pub name: String,
    pub report: QuadrantReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationSummary {
    pub label: ClassLabel,
    pub images: Vec<ClassifiedImage>,
    /// Image-level counts: positives land in tp/fn, negatives in tn/fp.
    pub counts: ConfusionCounts,
}

impl ClassificationSummary {
    /// PDR for a positive set, NDR for a negative one, in percent.
    pub fn rate_percent(&self) -> f64 {
        let c = self.counts;
        match self.label {
            ClassLabel::Positive => 100.0 * c.tp as f64 / (c.tp + c.fn_) as f64,
            ClassLabel::Negative => 100.0 * c.tn as f64 / (c.tn + c.fp) as f64,
        }
    }

    pub fn rate_name(&self) -> &'static str {
        match self.label {
            ClassLabel::Positive => "PDR",
            ClassLabel::Negative => "NDR",
        }
    }
}

fn stack(samples: &[Sample], device: &Device, dtype: DType) -> Result<Tensor> {
    let s0 = &samples[0];
    let data: Vec<f32> = samples.iter().flat_map(|s| s.image.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (samples.len(), 3, s0.height, s0.width), device)?.to_dtype(dtype)?)
}

/// Eval-mode prediction for arbitrary manifest entries.
pub fn predict_entries(network: &MhaUnet, entries: &[&ManifestEntry], mask_threshold: u8) -> Result<(Vec<Sample>, Prediction)> {
    if entries.is_empty() {
        return Err(Error::Data("no images to predict".into()));
    }
    let (device, dtype) = model_device(network);
    let samples = entries
        .iter()
        .map(|e| read_sample(e, network.config().input_size, mask_threshold))
        .collect::<Result<Vec<_>>>()?;
    let pred = network.predict(&stack(&samples, &device, dtype)?)?;
    Ok((samples, pred))
}

/// Runs EICA on every entry of `manifest` (all splits). Entries that carry a
/// mask must agree with `label` (non-empty mask for positives, empty for
/// negatives); a disagreement is a mixed-label manifest and is rejected.
pub fn batch_classify(
    network: &MhaUnet,
    manifest: &DatasetManifest,
    label: ClassLabel,
    config: &EicaConfig,
    batch_size: usize,
) -> Result<ClassificationSummary> {
    config.validate()?;
    if manifest.is_empty() {
        return Err(Error::Data("classification manifest is empty".into()));
    }
    let entries: Vec<&ManifestEntry> = manifest.entries.iter().collect();
    let mut images = Vec::with_capacity(entries.len());
    let mut counts = ConfusionCounts::default();
    for chunk in entries.chunks(batch_size.max(1)) {
        let (samples, pred) = predict_entries(network, chunk, manifest.mask_threshold)?;
        if pred.explain.len() != samples.len() {
            return Err(Error::Config("network has no decoder MHA block to explain".into()));
        }
        for (sample, bundle) in samples.iter().zip(&pred.explain) {
            if let Some(mask) = &sample.mask {
                let positive = mask.iter().any(|&v| v > 0.0);
                if positive != (label == ClassLabel::Positive) {
                    return Err(Error::Data(format!(
                        "{} has a {} mask in a manifest labelled {label}; mixed-label manifests are not supported",
                        sample.name,
                        if positive { "non-empty" } else { "empty" }
                    )));
                }
            }
            let report = classify(bundle, config)?;
            match (label, report.lesion_present()) {
                (ClassLabel::Positive, true) => counts.tp += 1,
                (ClassLabel::Positive, false) => counts.fn_ += 1,
                (ClassLabel::Negative, false) => counts.tn += 1,
                (ClassLabel::Negative, true) => counts.fp += 1,
            }
            images.push(ClassifiedImage {
                name: sample.name.clone(),
                report,
            });
        }
    }
    Ok(ClassificationSummary { label, images, counts })
}

pub const CLASSIFY_HEADER: [&str; 6] = ["image", "order1_ok", "order2_ok", "order4_ok", "order5_ok", "decision"];

pub fn write_classification_csv(summary: &ClassificationSummary, path: &Path) -> Result<()> {
    let err = |e: csv::Error| Error::ingestion(path, e);
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(CLASSIFY_HEADER).map_err(err)?;
    for im in &summary.images {
        let c = im.report.conditions;
        let b = |v: bool| (v as u8).to_string();
        w.write_record([
            im.name.clone(),
            b(c[0]),
            b(c[1]),
            b(c[2]),
            b(c[3]),
            im.report.decision.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
