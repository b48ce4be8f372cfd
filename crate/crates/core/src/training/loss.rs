use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub bce_weight: f64,
    pub dice_weight: f64,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            bce_weight: 0.5,
            dice_weight: 0.5,
            dice_smooth: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.bce_weight) || !ok(self.dice_weight) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.bce_weight == 0.0 && self.dice_weight == 0.0 {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        if !(self.dice_smooth.is_finite() && self.dice_smooth > 0.0) {
            return Err(Error::Config("dice_smooth must be positive".into()));
        }
        Ok(())
    }
}

fn check_shapes(logits: &Tensor, target: &Tensor) -> Result<()> {
    if logits.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "logits {:?} vs target {:?}",
            logits.dims(),
            target.dims()
        )));
    }
    if logits.rank() == 0 || logits.elem_count() == 0 {
        return Err(Error::Shape("loss needs a non-empty batch".into()));
    }
    Ok(())
}

/// Mean binary cross-entropy of `sigmoid(logits)` against `target`, computed
/// in the overflow-free form `max(l, 0) − l·t + ln(1 + e^{−|l|})`.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_shapes(logits, target)?;
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let per_elem = ((logits.relu()? - (logits * target)?)? + softplus)?;
    Ok(per_elem.mean_all()?)
}

/// `1 − mean_b[(2·Σ p·t + s) / (Σ p + Σ t + s)]` with `p = sigmoid(logits)`,
/// sums taken per batch item.
pub fn soft_dice_loss(logits: &Tensor, target: &Tensor, smooth: f64) -> Result<Tensor> {
    check_shapes(logits, target)?;
    let b = logits.dim(0)?;
    let p = sigmoid(logits)?.reshape((b, ()))?;
    let t = target.reshape((b, ()))?;
    let inter = (&p * &t)?.sum(1)?;
    let num = ((inter * 2.0)? + smooth)?;
    let den = ((p.sum(1)? + t.sum(1)?)? + smooth)?;
    let score = (num / den)?.mean_all()?;
    Ok(score.affine(-1.0, 1.0)?)
}

/// Weighted sum of the BCE and soft-Dice terms; scalar tensor.
pub fn bce_dice_loss(logits: &Tensor, target: &Tensor, weights: &LossWeights) -> Result<Tensor> {
    weights.validate()?;
    let bce = bce_with_logits(logits, target)?;
    let dice = soft_dice_loss(logits, target, weights.dice_smooth)?;
    Ok(((bce * weights.bce_weight)? + (dice * weights.dice_weight)?)?)
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
