//! Confusion counts and the segmentation / detection metrics derived from them.
//!
//! Conventions where a ratio would be 0/0:
//! - DSC is 1.0 when prediction and ground truth are both empty, and 0.0 when
//!   exactly one of them is.
//! - SE (resp. SP) is `None` when there are no positive (resp. negative)
//!   ground-truth units; such images are left out of per-image averages.

use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            tp: self.tp + rhs.tp,
            tn: self.tn + rhs.tn,
            fp: self.fp + rhs.fp,
            fn_: self.fn_ + rhs.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

fn check_binary(mask: &[f32], what: &str) -> Result<()> {
    match mask.iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(Error::Data(format!("{what} mask is not binary (found {v})"))),
        None => Ok(()),
    }
}

/// Pixel-wise confusion counts of two binary masks of equal length.
pub fn confusion(pred: &[f32], truth: &[f32]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            truth.len()
        )));
    }
    check_binary(pred, "predicted")?;
    check_binary(truth, "ground-truth")?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == 1.0, t == 1.0) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub dsc: f64,
    pub acc: f64,
    pub se: Option<f64>,
    pub sp: Option<f64>,
    pub counts: ConfusionCounts,
}

impl MetricsReport {
    /// Sensitivity as a detection-rate percentage (PDR).
    pub fn pdr_percent(&self) -> Option<f64> {
        self.se.map(|v| 100.0 * v)
    }

    /// Specificity as a detection-rate percentage (NDR).
    pub fn ndr_percent(&self) -> Option<f64> {
        self.sp.map(|v| 100.0 * v)
    }
}

pub fn metrics(counts: ConfusionCounts) -> Result<MetricsReport> {
    let ConfusionCounts { tp, tn, fp, fn_ } = counts;
    let total = counts.total();
    if total == 0 {
        return Err(Error::UndefinedMetric("no units were evaluated".into()));
    }
    let dice_den = 2 * tp + fp + fn_;
    let dsc = if dice_den == 0 {
        1.0
    } else {
        (2 * tp) as f64 / dice_den as f64
    };
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    Ok(MetricsReport {
        dsc,
        acc: (tp + tn) as f64 / total as f64,
        se: ratio(tp, tp + fn_),
        sp: ratio(tn, tn + fp),
        counts,
    })
}

/// Mean of each metric over per-image reports, skipping undefined SE/SP.
pub fn mean_per_image(reports: &[MetricsReport]) -> Option<(f64, f64, Option<f64>, Option<f64>)> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let dsc = reports.iter().map(|r| r.dsc).sum::<f64>() / n;
    let acc = reports.iter().map(|r| r.acc).sum::<f64>() / n;
    let mean_opt = |vals: Vec<f64>| {
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let se = mean_opt(reports.iter().filter_map(|r| r.se).collect());
    let sp = mean_opt(reports.iter().filter_map(|r| r.sp).collect());
    Some((dsc, acc, se, sp))
}
