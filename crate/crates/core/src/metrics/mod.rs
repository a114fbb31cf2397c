//! Image quality metrics: PSNR, MS-SSIM and LPIPS.

mod lpips;
mod ms_ssim;

use serde::{Deserialize, Serialize};

use crate::image_tensor::ImageTensor;
use crate::{Error, Result};

pub use lpips::{lpips, lpips_batch, Backbone, FeatureNet, LpipsConfig, ALEXNET_ASSET, ASSET_DIR_ENV};
pub use ms_ssim::{ms_ssim, ms_ssim_scales, MS_SSIM_MIN_SIDE};

/// Returned by [`psnr`] when the images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

fn check_same_dims(x: &ImageTensor, x_hat: &ImageTensor) -> Result<()> {
    if x.dims() != x_hat.dims() {
        return Err(Error::invalid(format!(
            "image dims differ: {} vs {}",
            x.dims(),
            x_hat.dims()
        )));
    }
    Ok(())
}

pub fn mse(x: &ImageTensor, x_hat: &ImageTensor) -> Result<f64> {
    check_same_dims(x, x_hat)?;
    let sum: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
        .sum();
    Ok(sum / x.data().len() as f64)
}

/// `10·log10(peak² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &ImageTensor, x_hat: &ImageTensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("peak must be positive, got {peak}")));
    }
    Ok(psnr_from_mse(mse(x, x_hat)?, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("cannot aggregate an empty set of values"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std: var.sqrt(),
        })
    }
}

/// Per-image metric values and their aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: Vec<f64>,
    pub ms_ssim: Vec<f64>,
    pub lpips: Vec<f64>,
}

impl MetricReport {
    pub fn len(&self) -> usize {
        self.psnr_db.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psnr_db.is_empty()
    }

    pub fn psnr(&self) -> Result<Aggregate> {
        Aggregate::of(&self.psnr_db)
    }

    pub fn ms_ssim(&self) -> Result<Aggregate> {
        Aggregate::of(&self.ms_ssim)
    }

    pub fn lpips(&self) -> Result<Aggregate> {
        Aggregate::of(&self.lpips)
    }
}

/// Evaluates all three metrics image by image.
pub fn evaluate(refs: &[ImageTensor], recs: &[ImageTensor], net: &FeatureNet) -> Result<MetricReport> {
    if refs.len() != recs.len() {
        return Err(Error::invalid(format!(
            "{} references vs {} reconstructions",
            refs.len(),
            recs.len()
        )));
    }
    let mut report = MetricReport {
        psnr_db: Vec::with_capacity(refs.len()),
        ms_ssim: Vec::with_capacity(refs.len()),
        lpips: Vec::with_capacity(refs.len()),
    };
    for (x, x_hat) in refs.iter().zip(recs) {
        report.psnr_db.push(psnr(x, x_hat, 1.0)?);
        report.ms_ssim.push(ms_ssim(x, x_hat)?);
    }
    if !refs.is_empty() {
        report.lpips = lpips(net, refs, recs)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_tensor::ImageDims;

    fn flat(v: f32) -> ImageTensor {
        ImageTensor::filled(ImageDims::new(3, 16, 16), v).unwrap()
    }

    #[test]
    fn psnr_reference_values() {
        assert_eq!(psnr(&flat(0.3), &flat(0.3), 1.0).unwrap(), PSNR_CAP_DB);
        // uniform error 0.1 -> MSE 0.01 -> 20 dB
        let p = psnr(&flat(0.5), &flat(0.6), 1.0).unwrap();
        assert!((p - 20.0).abs() < 1e-5, "{p}");
        // MSE = peak^2 -> 0 dB
        assert!(psnr(&flat(0.0), &flat(1.0), 1.0).unwrap().abs() < 1e-12);
        assert!(psnr(&flat(0.0), &flat(1.0), 0.0).is_err());
    }

    #[test]
    fn aggregate_matches_direct_computation() {
        let a = Aggregate::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((a.mean - 2.5).abs() < 1e-15);
        assert!((a.std - 1.25f64.sqrt()).abs() < 1e-15);
        assert!(Aggregate::of(&[]).is_err());
    }
}
