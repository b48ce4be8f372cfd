use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::training::TrainConfig;

/// Cosine-annealed learning rate for `epoch ∈ [0, epochs]`:
/// `lr_min + ½(lr_init − lr_min)(1 + cos(π·epoch/epochs))`.
///
/// The first half of the schedule is evaluated as
/// `lr_init − ½(lr_init − lr_min)(1 − cos(…))`, which is algebraically the
/// same curve but lands exactly on `lr_init` at epoch 0 (and the second half
/// exactly on `lr_min` at the final epoch).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if cfg.epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    if epoch > cfg.epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} outside the schedule of {} epochs",
            cfg.epochs
        )));
    }
    let half_span = 0.5 * (cfg.lr_init - cfg.lr_min);
    let cos = (PI * epoch as f64 / cfg.epochs as f64).cos();
    Ok(if 2 * epoch <= cfg.epochs {
        cfg.lr_init - half_span * (1.0 - cos)
    } else {
        cfg.lr_min + half_span * (1.0 + cos)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.001);
        assert_eq!(lr_at(cfg.epochs, &cfg).unwrap(), 0.00001);
        let mid = lr_at(cfg.epochs / 2, &cfg).unwrap();
        assert!((mid - 0.000505).abs() < 1e-12);
        assert!(lr_at(cfg.epochs + 1, &cfg).is_err());
    }

    #[test]
    fn monotone_non_increasing() {
        let cfg = TrainConfig { epochs: 37, ..TrainConfig::default() };
        let lrs: Vec<f64> = (0..=37).map(|e| lr_at(e, &cfg).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
