//! Correlated synthetic stereo pairs.
//!
//! `x` is a smooth random field: a shared Gaussian-blurred noise plane plus a
//! weaker per-channel plane, min-max rescaled to `[0, 1]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Split, SplitSizes, StereoPair};
use crate::image_tensor::{ImageDims, ImageTensor};
use crate::rng::stream_rng;
use crate::{Error, Result};

const PER_CHANNEL_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    /// `x_side = clamp(x + N(0, noise_std²))`.
    AdditiveNoise,
    /// `x` shifted horizontally by `shift_px` with edge replication.
    Shift,
    /// A fresh field from an unrelated stream.
    Independent,
}

fn default_noise_std() -> f64 {
    0.05
}

fn default_shift() -> i64 {
    2
}

fn default_smoothness() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub dims: ImageDims,
    pub correlation_mode: CorrelationMode,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    #[serde(default = "default_shift")]
    pub shift_px: i64,
    /// Standard deviation in pixels of the blur that shapes the field.
    #[serde(default = "default_smoothness")]
    pub smoothness: f64,
    pub counts: SplitSizes,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(dims: ImageDims, correlation_mode: CorrelationMode, counts: SplitSizes, seed: u64) -> Self {
        Self {
            dims,
            correlation_mode,
            noise_std: default_noise_std(),
            shift_px: default_shift(),
            smoothness: default_smoothness(),
            counts,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::Config(format!("empty synthetic dims {}", self.dims)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if !(self.smoothness > 0.0 && self.smoothness.is_finite()) {
            return Err(Error::Config(format!("smoothness must be > 0, got {}", self.smoothness)));
        }
        Ok(())
    }
}

/// Circular Gaussian blur of one plane.
fn blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let wrap = |i: i64, n: usize| i.rem_euclid(n as i64) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .zip(-radius..)
                .map(|(k, d)| k * plane[y * w + wrap(x as i64 + d, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .zip(-radius..)
                .map(|(k, d)| k * tmp[wrap(y as i64 + d, h) * w + x])
                .sum();
        }
    }
    out
}

fn blurred_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
    blur(&raw, h, w, sigma)
}

fn smooth_field(rng: &mut ChaCha8Rng, dims: ImageDims, sigma: f64) -> Result<ImageTensor> {
    let (h, w) = (dims.height, dims.width);
    let shared = blurred_noise(rng, h, w, sigma);
    let mut values = Vec::with_capacity(dims.len());
    for _ in 0..dims.channels {
        let own = blurred_noise(rng, h, w, sigma);
        values.extend(shared.iter().zip(&own).map(|(s, o)| s + PER_CHANNEL_WEIGHT * o));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    ImageTensor::new(dims, values.iter().map(|v| ((v - lo) / span) as f32).collect())
}

fn global_index(counts: &SplitSizes, split: Split, i: usize) -> u64 {
    let offset = match split {
        Split::Train => 0,
        Split::Val => counts.train,
        Split::Test => counts.train + counts.val,
    };
    (offset + i) as u64
}

/// One pair, generated from streams keyed by its global index.
pub fn synthetic_pair(cfg: &SyntheticConfig, index: u64) -> Result<StereoPair> {
    let d = cfg.dims;
    let x = smooth_field(&mut stream_rng(cfg.seed, "synthetic/field", index), d, cfg.smoothness)?;
    let x_side = match cfg.correlation_mode {
        CorrelationMode::AdditiveNoise => {
            let mut rng = stream_rng(cfg.seed, "synthetic/side_noise", index);
            let data = x
                .data()
                .iter()
                .map(|&v| {
                    let n: f64 = rng.sample(StandardNormal);
                    (f64::from(v) + cfg.noise_std * n).clamp(0.0, 1.0) as f32
                })
                .collect();
            ImageTensor::new(d, data)?
        }
        CorrelationMode::Shift => ImageTensor::from_fn(d, |c, y, xx| {
            let src = (xx as i64 - cfg.shift_px).clamp(0, d.width as i64 - 1) as usize;
            x.get(c, y, src)
        })?,
        CorrelationMode::Independent => smooth_field(
            &mut stream_rng(cfg.seed, "synthetic/independent", index),
            d,
            cfg.smoothness,
        )?,
    };
    Ok(StereoPair {
        pair_id: format!("synthetic-{index:06}"),
        x,
        x_side,
    })
}

/// Pairs of one split. Splits draw from disjoint index ranges.
pub fn generate_split(cfg: &SyntheticConfig, split: Split) -> Result<Vec<StereoPair>> {
    cfg.validate()?;
    (0..cfg.counts.get(split))
        .map(|i| synthetic_pair(cfg, global_index(&cfg.counts, split, i)))
        .collect()
}

/// All pairs, train then val then test.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<StereoPair>> {
    let mut all = Vec::with_capacity(cfg.counts.total());
    for split in Split::ALL {
        all.extend(generate_split(cfg, split)?);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: CorrelationMode) -> SyntheticConfig {
        SyntheticConfig::new(ImageDims::new(3, 16, 32), mode, SplitSizes::new(8, 2, 2), 11)
    }

    #[test]
    fn zero_noise_gives_identical_side() {
        let mut c = cfg(CorrelationMode::AdditiveNoise);
        c.noise_std = 0.0;
        for p in generate_split(&c, Split::Train).unwrap() {
            assert_eq!(p.x, p.x_side);
        }
    }

    #[test]
    fn deterministic_and_split_disjoint() {
        let c = cfg(CorrelationMode::AdditiveNoise);
        assert_eq!(generate_synthetic(&c).unwrap(), generate_synthetic(&c).unwrap());
        let train = generate_split(&c, Split::Train).unwrap();
        let test = generate_split(&c, Split::Test).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(test.len(), 2);
        assert!(train.iter().all(|a| test.iter().all(|b| a.pair_id != b.pair_id && a.x != b.x)));
    }

    #[test]
    fn fields_span_unit_range() {
        let p = synthetic_pair(&cfg(CorrelationMode::Independent), 0).unwrap();
        let lo = p.x.data().iter().copied().fold(f32::INFINITY, f32::min);
        let hi = p.x.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn shift_replicates_edges() {
        let mut c = cfg(CorrelationMode::Shift);
        c.shift_px = 3;
        let p = synthetic_pair(&c, 0).unwrap();
        for y in 0..16 {
            assert_eq!(p.x_side.get(1, y, 0), p.x.get(1, y, 0));
            assert_eq!(p.x_side.get(1, y, 2), p.x.get(1, y, 0));
            assert_eq!(p.x_side.get(1, y, 10), p.x.get(1, y, 7));
        }
    }
}
