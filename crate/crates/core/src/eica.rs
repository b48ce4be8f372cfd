//! Explainable inference classification (EICA).
//!
//! Decides whether an image contains a lesion from where each interaction
//! order of the last decoder MHAblock fires. Orders 1, 2, 4 and 5 each have a
//! positional rule on the centroid of their active region:
//!
//! | order | rule (normalised `(row, col)`) |
//! |-------|--------------------------------|
//! | 1     | upper half: `row < 0.5` |
//! | 2     | lower-right quadrant: `row ≥ 0.5 ∧ col ≥ 0.5` |
//! | 4     | upper-right quadrant: `row < 0.5 ∧ col ≥ 0.5` |
//! | 5     | left half: `col < 0.5` |
//!
//! The lesion is reported present only if all four hold. Nothing here is
//! learned; an inactive order fails its rule.

use crate::error::{Error, Result};
use crate::explain::{ExplainabilityBundle, Heatmap};

pub const RULE_ORDERS: [usize; 4] = [1, 2, 4, 5];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EicaConfig {
    /// Pixels at or above this fraction of the map maximum form the active region.
    pub activation_threshold_frac: f64,
    /// Active-region energy below which an order counts as silent.
    pub min_energy: f64,
}

impl Default for EicaConfig {
    fn default() -> Self {
        Self {
            activation_threshold_frac: 0.5,
            min_energy: 0.0,
        }
    }
}

impl EicaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.activation_threshold_frac > 0.0 && self.activation_threshold_frac < 1.0) {
            return Err(Error::Config(format!(
                "activation_threshold_frac must lie in (0, 1), got {}",
                self.activation_threshold_frac
            )));
        }
        if !(self.min_energy >= 0.0 && self.min_energy.is_finite()) {
            return Err(Error::Config(format!(
                "min_energy must be a non-negative number, got {}",
                self.min_energy
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Localization {
    pub active: bool,
    /// Normalised `(row, col)` in `[0, 1]²`; present iff `active`.
    pub centroid: Option<(f64, f64)>,
    pub energy: f64,
}

/// Active region, energy and energy-weighted centroid of a `[0, 1]` map.
pub fn localize(map: &Heatmap, config: &EicaConfig) -> Result<Localization> {
    config.validate()?;
    if !map.is_normalized() {
        return Err(Error::Data("order map must be normalised to [0, 1]".into()));
    }
    let peak = map.max();
    let inactive = Localization {
        active: false,
        centroid: None,
        energy: 0.0,
    };
    if !(peak > 0.0) {
        return Ok(inactive);
    }
    let threshold = config.activation_threshold_frac * peak;
    let (mut energy, mut row_sum, mut col_sum) = (0.0, 0.0, 0.0);
    for r in 0..map.height {
        for c in 0..map.width {
            let v = map.at(r, c);
            if v >= threshold {
                energy += v;
                row_sum += v * r as f64;
                col_sum += v * c as f64;
            }
        }
    }
    if energy < config.min_energy {
        return Ok(Localization {
            energy,
            ..inactive
        });
    }
    let norm = |sum: f64, extent: usize| {
        if extent > 1 {
            sum / energy / (extent - 1) as f64
        } else {
            0.5
        }
    };
    Ok(Localization {
        active: true,
        centroid: Some((norm(row_sum, map.height), norm(col_sum, map.width))),
        energy,
    })
}

pub fn rule_holds(order: usize, loc: &Localization) -> bool {
    let Some((row, col)) = loc.centroid.filter(|_| loc.active) else {
        return false;
    };
    match order {
        1 => row < 0.5,
        2 => row >= 0.5 && col >= 0.5,
        4 => row < 0.5 && col >= 0.5,
        5 => col < 0.5,
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderFinding {
    pub order: usize,
    pub localization: Localization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadrantReport {
    pub per_order: [OrderFinding; 4],
    /// Rule outcomes for orders 1, 2, 4, 5.
    pub conditions: [bool; 4],
    /// 1 when a lesion is judged present.
    pub decision: u8,
}

impl QuadrantReport {
    pub fn lesion_present(&self) -> bool {
        self.decision == 1
    }
}

pub fn classify(bundle: &ExplainabilityBundle, config: &EicaConfig) -> Result<QuadrantReport> {
    config.validate()?;
    let mut findings = Vec::with_capacity(4);
    for order in RULE_ORDERS {
        let map = bundle
            .order(order)
            .ok_or_else(|| Error::Data(format!("bundle has no order-{order} map")))?;
        if map.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("order-{order} map has non-finite values")));
        }
        let localization = localize(&map.min_max_normalized(), config)?;
        findings.push(OrderFinding { order, localization });
    }
    let per_order: [OrderFinding; 4] = findings.try_into().expect("four rule orders");
    let conditions = per_order.map(|f| rule_holds(f.order, &f.localization));
    let decision = conditions.iter().all(|&c| c) as u8;
    Ok(QuadrantReport {
        per_order,
        conditions,
        decision,
    })
}

/// Picks the largest noise floor among `candidates` that still reaches the
/// best positive detection rate on `positives` (bundles known to contain a
/// lesion).
pub fn calibrate_min_energy(
    positives: &[ExplainabilityBundle],
    activation_threshold_frac: f64,
    candidates: &[f64],
) -> Result<f64> {
    if positives.is_empty() || candidates.is_empty() {
        return Err(Error::Data("calibration needs positive bundles and candidates".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for &min_energy in candidates {
        let cfg = EicaConfig {
            activation_threshold_frac,
            min_energy,
        };
        let mut hits = 0;
        for b in positives {
            hits += classify(b, &cfg)?.decision as usize;
        }
        best = match best {
            Some((h, e)) if h > hits || (h == hits && e >= min_energy) => Some((h, e)),
            _ => Some((hits, min_energy)),
        };
    }
    Ok(best.expect("non-empty candidates").1)
}
