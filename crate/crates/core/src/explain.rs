use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Single-channel `H×W` map stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Heatmap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} heatmap needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Rescales to `[0, 1]`; a constant map becomes all zeros.
    pub fn min_max_normalized(&self) -> Self {
        let (lo, hi) = (self.min(), self.max());
        let span = hi - lo;
        let data = if span > 0.0 && span.is_finite() {
            self.data.iter().map(|v| (v - lo) / span).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn is_normalized(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Per-order activation maps of the last decoder MHAblock for one image,
/// together with the fused lesion probability map.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplainabilityBundle {
    pub order_maps: BTreeMap<usize, Heatmap>,
    pub probability: Heatmap,
}

impl ExplainabilityBundle {
    pub fn order(&self, order: usize) -> Option<&Heatmap> {
        self.order_maps.get(&order)
    }
}
