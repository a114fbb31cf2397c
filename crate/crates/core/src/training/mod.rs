//! Channel-in-the-loop training with early stopping on validation PSNR.

mod log;
mod trainer;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::metrics::{lpips_batch, FeatureNet};
use crate::{Error, Result};

pub use self::log::{LogRecord, StopReason, TrainLog};
pub use trainer::{fit, fit_with_validator, validation_psnr, FitOutcome, SnrSampler, StepOutcome, Trainer};

fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    32
}
fn default_p_avg() -> f64 {
    1.0
}
fn default_snr_range() -> [f64; 2] {
    [-5.0, 5.0]
}
fn default_lambda() -> f64 {
    0.5
}
fn default_patience() -> usize {
    10
}
fn default_max_epochs() -> usize {
    500
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}
fn default_val_grid() -> Vec<f64> {
    vec![-5.0, -3.0, -1.0, 1.0, 3.0, 5.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_p_avg")]
    pub p_avg: f64,
    /// Training SNRs are drawn uniformly from this interval (dB).
    #[serde(default = "default_snr_range")]
    pub snr_range_db: [f64; 2],
    #[serde(default = "default_lambda")]
    pub lambda_lpips: f64,
    #[serde(default = "default_patience")]
    pub patience_e: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub grad_clip_norm: Option<f64>,
    /// Validation PSNR is averaged over these SNRs (dB).
    #[serde(default = "default_val_grid")]
    pub val_snr_grid_db: Vec<f64>,
    /// Assert the power constraint on every training batch.
    #[serde(default)]
    pub check_power: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            p_avg: default_p_avg(),
            snr_range_db: default_snr_range(),
            lambda_lpips: default_lambda(),
            patience_e: default_patience(),
            max_epochs: default_max_epochs(),
            seed: 0,
            grad_clip_norm: default_clip(),
            val_snr_grid_db: default_val_grid(),
            check_power: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.p_avg > 0.0 && self.p_avg.is_finite()) {
            return bad(format!("p_avg must be positive, got {}", self.p_avg));
        }
        let [lo, hi] = self.snr_range_db;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return bad(format!("snr_range_db must be a nonempty interval, got [{lo}, {hi}]"));
        }
        if !(self.lambda_lpips >= 0.0 && self.lambda_lpips.is_finite()) {
            return bad(format!("lambda_lpips must be >= 0, got {}", self.lambda_lpips));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return bad(format!("grad_clip_norm must be positive, got {c}"));
            }
        }
        if self.val_snr_grid_db.is_empty() || self.val_snr_grid_db.iter().any(|s| !s.is_finite()) {
            return bad("val_snr_grid_db must be a nonempty list of finite values".into());
        }
        Ok(())
    }
}

/// `MSE + λ·LPIPS`, both averaged over the batch.
///
/// `x` and `x_hat` are `(B, C, H, W)`. With `λ = 0` the perceptual term is not
/// evaluated and the result is exactly [`mse_loss`].
pub fn composite_loss(x: &Tensor, x_hat: &Tensor, lambda: f64, net: Option<&FeatureNet>) -> Result<Tensor> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    let mse = mse_loss(x, x_hat)?;
    if lambda == 0.0 {
        return Ok(mse);
    }
    let net = net.ok_or_else(|| Error::invalid("lambda > 0 needs a perceptual feature network"))?;
    let perceptual = lpips_batch(net, x, x_hat)?.to_dtype(mse.dtype())?.mean_all()?;
    Ok((mse + (perceptual * lambda)?)?)
}

/// Mean squared error over all elements.
pub fn mse_loss(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    if x.dims() != x_hat.dims() {
        return Err(Error::invalid(format!(
            "loss inputs differ in shape: {:?} vs {:?}",
            x.dims(),
            x_hat.dims()
        )));
    }
    Ok((x_hat - x)?.sqr()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn full(v: f64) -> Tensor {
        Tensor::full(v, (2, 3, 16, 16), &Device::Cpu).unwrap()
    }

    fn scalar(t: Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn loss_reference_values() {
        let net = FeatureNet::surrogate(0, DType::F64).unwrap();
        assert_eq!(scalar(composite_loss(&full(0.4), &full(0.4), 0.5, Some(&net)).unwrap()), 0.0);
        let l = scalar(composite_loss(&full(0.5), &full(0.6), 0.0, None).unwrap());
        assert!((l - 0.01).abs() < 1e-12, "{l}");
        assert!(composite_loss(&full(0.5), &full(0.6), 0.5, None).is_err());
    }

    #[test]
    fn zero_lambda_is_mse() {
        let x = Tensor::rand(0f64, 1.0, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let y = Tensor::rand(0f64, 1.0, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let net = FeatureNet::surrogate(0, DType::F64).unwrap();
        let a = scalar(composite_loss(&x, &y, 0.0, Some(&net)).unwrap());
        let b = scalar(mse_loss(&x, &y).unwrap());
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn default_config_values() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.snr_range_db, [-5.0, 5.0]);
        assert_eq!(c.patience_e, 10);
        assert_eq!(c.max_epochs, 500);
        assert!(c.validate().is_ok());
        let parsed: TrainConfig = toml::from_str("seed = 3").unwrap();
        assert_eq!(parsed, TrainConfig { seed: 3, ..c });
    }
}
