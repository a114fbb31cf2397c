//! Transmit power normalization, the complex AWGN channel and SNR bookkeeping.
//!
//! Two paths are provided. The scalar path works on `Complex64` slices and is
//! the exact reference. The batch path works on real `(B, 2k)` tensors in the
//! split-half layout produced by [`pack_complex`] (real parts first, then
//! imaginary parts) and is what the differentiable training forward uses.

use candle_core::{DType, Device, Tensor, D};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::rng::stream_rng;
use crate::{Error, Result};

/// Noise power for a channel SNR in dB: `p_avg / 10^(snr/10)`.
pub fn snr_to_sigma2(snr_db: f64, p_avg: f64) -> Result<f64> {
    if !(p_avg > 0.0) || !p_avg.is_finite() {
        return Err(Error::invalid(format!("average power must be positive, got {p_avg}")));
    }
    if !snr_db.is_finite() {
        return Err(Error::invalid(format!("SNR must be finite, got {snr_db}")));
    }
    let sigma2 = p_avg / 10f64.powf(snr_db / 10.0);
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::invalid(format!(
            "SNR {snr_db} dB gives a noise power outside the representable range"
        )));
    }
    Ok(sigma2)
}

/// Channel SNR in dB for a given noise power: `10 log10(p_avg / sigma2)`.
pub fn sigma2_to_snr(sigma2: f64, p_avg: f64) -> Result<f64> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::invalid(format!("noise power must be positive, got {sigma2}")));
    }
    if !(p_avg > 0.0) || !p_avg.is_finite() {
        return Err(Error::invalid(format!("average power must be positive, got {p_avg}")));
    }
    Ok(10.0 * (p_avg / sigma2).log10())
}

/// Number of complex channel uses for bandwidth ratio `rho`: `round(rho·C·H·W)`.
pub fn channel_uses(rho: f64, channels: usize, height: usize, width: usize) -> usize {
    (rho * (channels * height * width) as f64).round() as usize
}

/// Complex channel input after power normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSymbols {
    values: Vec<Complex64>,
}

impl ChannelSymbols {
    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    /// Number of channel uses.
    pub fn k(&self) -> usize {
        self.values.len()
    }

    /// `(1/k)·‖z‖²`.
    pub fn average_power(&self) -> f64 {
        average_power(&self.values)
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }
}

pub fn average_power(z: &[Complex64]) -> f64 {
    z.iter().map(|v| v.norm_sqr()).sum::<f64>() / z.len() as f64
}

/// Scales `z_tilde` onto the power sphere: `z = sqrt(k·p_avg) · z̃ / sqrt(z̃ᴴz̃)`.
pub fn power_normalize(z_tilde: &[Complex64], p_avg: f64) -> Result<ChannelSymbols> {
    if !(p_avg > 0.0) {
        return Err(Error::invalid(format!("average power must be positive, got {p_avg}")));
    }
    let energy: f64 = z_tilde.iter().map(|v| v.norm_sqr()).sum();
    if z_tilde.is_empty() || energy == 0.0 {
        return Err(Error::DegenerateInput(
            "cannot power-normalize an all-zero encoder output".into(),
        ));
    }
    if !energy.is_finite() {
        return Err(Error::DegenerateInput("encoder output has non-finite energy".into()));
    }
    let scale = (z_tilde.len() as f64 * p_avg).sqrt() / energy.sqrt();
    Ok(ChannelSymbols {
        values: z_tilde.iter().map(|v| v * scale).collect(),
    })
}

/// Noise configuration and RNG of one AWGN channel realization stream.
///
/// Not meant to be shared across threads: each caller owns its state.
#[derive(Debug, Clone)]
pub struct ChannelState {
    sigma2: f64,
    p_avg: f64,
    seed: u64,
    rng: ChaCha8Rng,
}

impl ChannelState {
    pub fn new(sigma2: f64, p_avg: f64, seed: u64) -> Result<Self> {
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::invalid(format!("noise power must be positive, got {sigma2}")));
        }
        if !(p_avg > 0.0) || !p_avg.is_finite() {
            return Err(Error::invalid(format!("average power must be positive, got {p_avg}")));
        }
        Ok(Self {
            sigma2,
            p_avg,
            seed,
            rng: stream_rng(seed, "awgn", 0),
        })
    }

    pub fn from_snr_db(snr_db: f64, p_avg: f64, seed: u64) -> Result<Self> {
        Self::new(snr_to_sigma2(snr_db, p_avg)?, p_avg, seed)
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn p_avg(&self) -> f64 {
        self.p_avg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn snr_db(&self) -> f64 {
        10.0 * (self.p_avg / self.sigma2).log10()
    }

    /// `y = z + n`, `n ~ CN(0, σ²I)`. `k` is the configured channel bandwidth.
    pub fn transmit(&mut self, z: &ChannelSymbols, k: usize) -> Result<Vec<Complex64>> {
        if z.k() != k {
            return Err(Error::invalid(format!(
                "symbol vector has {} channel uses, channel is configured for {k}",
                z.k()
            )));
        }
        let noise = complex_noise(&mut self.rng, k);
        let sigma = self.sigma2.sqrt();
        Ok(z.values.iter().zip(noise).map(|(s, n)| s + n * sigma).collect())
    }
}

/// Free-function form of [`ChannelState::transmit`].
pub fn awgn_transmit(z: &ChannelSymbols, k: usize, state: &mut ChannelState) -> Result<Vec<Complex64>> {
    state.transmit(z, k)
}

/// `k` draws of unit-power circularly-symmetric complex Gaussian noise
/// (real and imaginary parts each with variance 1/2), interleaved re/im.
pub fn complex_noise(rng: &mut impl Rng, k: usize) -> Vec<Complex64> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    (0..k)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re * s, im * s)
        })
        .collect()
}

/// Splits a `(2c, h, w)` real array into `c·h·w` complex values: channels
/// `0..c` become real parts, channels `c..2c` imaginary parts, both flattened
/// row-major over (channel, row, column).
pub fn pack_complex(real: &[f64], channels: usize, height: usize, width: usize) -> Result<Vec<Complex64>> {
    if channels % 2 != 0 {
        return Err(Error::invalid(format!(
            "complex packing needs an even channel count, got {channels}"
        )));
    }
    if real.len() != channels * height * width {
        return Err(Error::invalid(format!(
            "array has {} elements, expected {channels}x{height}x{width}",
            real.len()
        )));
    }
    let k = real.len() / 2;
    Ok((0..k).map(|i| Complex64::new(real[i], real[k + i])).collect())
}

/// Exact inverse of [`pack_complex`]; returns the flattened `(2c, h, w)` array.
pub fn unpack_complex(z: &[Complex64]) -> Vec<f64> {
    z.iter().map(|v| v.re).chain(z.iter().map(|v| v.im)).collect()
}

/// Batch power normalization of `(B, 2k)` split-half real latents.
///
/// Differentiable. Fails if any row is all-zero or non-finite.
pub fn power_normalize_batch(z_tilde: &Tensor, p_avg: f64) -> Result<Tensor> {
    let (_, two_k) = z_tilde.dims2()?;
    let k = two_k / 2;
    let energy = z_tilde.sqr()?.sum_keepdim(D::Minus1)?;
    let energies: Vec<f64> = energy.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    if let Some(row) = energies.iter().position(|e| !(*e > 0.0) || !e.is_finite()) {
        return Err(Error::DegenerateInput(format!(
            "encoder output row {row} has energy {}; cannot power-normalize",
            energies[row]
        )));
    }
    let scale = ((k as f64 * p_avg).sqrt() / energy.sqrt()?)?;
    Ok(z_tilde.broadcast_mul(&scale)?)
}

/// Unit-power complex noise for a batch, as a `(B, 2k)` split-half tensor.
/// Row `b` is drawn from `rngs[b]` with [`complex_noise`].
pub fn unit_noise_batch(rngs: &mut [ChaCha8Rng], k: usize, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rngs.len() * 2 * k);
    for rng in rngs.iter_mut() {
        data.extend(unpack_complex(&complex_noise(rng, k)));
    }
    Ok(Tensor::from_vec(data, (rngs.len(), 2 * k), &Device::Cpu)?.to_dtype(dtype)?)
}

/// `y = z + sqrt(σ²_b)·n_b` row-wise, with `unit_noise` from [`unit_noise_batch`].
pub fn add_noise_batch(z: &Tensor, unit_noise: &Tensor, sigma2: &[f64]) -> Result<Tensor> {
    let (b, _) = z.dims2()?;
    if sigma2.len() != b || unit_noise.dims() != z.dims() {
        return Err(Error::invalid(format!(
            "noise batch mismatch: latents {:?}, noise {:?}, {} noise powers",
            z.dims(),
            unit_noise.dims(),
            sigma2.len()
        )));
    }
    let sigma: Vec<f64> = sigma2.iter().map(|s| s.sqrt()).collect();
    let sigma = Tensor::from_vec(sigma, (b, 1), &Device::Cpu)?.to_dtype(z.dtype())?;
    Ok((z + unit_noise.broadcast_mul(&sigma)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn snr_conversion_examples() {
        assert_eq!(snr_to_sigma2(0.0, 1.0).unwrap(), 1.0);
        assert!((snr_to_sigma2(10.0, 1.0).unwrap() - 0.1).abs() < 1e-15);
        assert!((snr_to_sigma2(-5.0, 1.0).unwrap() - 3.1623).abs() < 1e-4);
        assert_eq!(sigma2_to_snr(1.0, 1.0).unwrap(), 0.0);
        assert!((sigma2_to_snr(0.1, 1.0).unwrap() - 10.0).abs() < 1e-12);
        assert!((sigma2_to_snr(3.1623, 1.0).unwrap() + 5.0).abs() < 1e-3);
    }

    #[test]
    fn snr_conversion_rejects_bad_power() {
        assert!(matches!(snr_to_sigma2(0.0, 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(snr_to_sigma2(0.0, -1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(sigma2_to_snr(0.0, 1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(sigma2_to_snr(1.0, 0.0), Err(Error::InvalidArgument(_))));
        // 10^(4000/10) overflows
        assert!(snr_to_sigma2(-4000.0, 1.0).is_err());
    }

    #[test]
    fn normalize_examples() {
        let z = power_normalize(&[c(1.0, 0.0), c(1.0, 0.0)], 1.0).unwrap();
        assert_eq!(z.values(), &[c(1.0, 0.0), c(1.0, 0.0)]);
        let z = power_normalize(&[c(2.0, 0.0), c(0.0, 0.0)], 1.0).unwrap();
        assert!((z.values()[0].re - 1.41421).abs() < 1e-5);
        assert_eq!(z.values()[1], c(0.0, 0.0));
    }

    #[test]
    fn normalize_rejects_all_zero() {
        let err = power_normalize(&[c(0.0, 0.0); 4], 1.0).unwrap_err();
        assert!(matches!(err, Error::DegenerateInput(_)));
    }

    #[test]
    fn pack_smallest_case() {
        assert_eq!(pack_complex(&[3.0, 4.0], 2, 1, 1).unwrap(), vec![c(3.0, 4.0)]);
    }

    #[test]
    fn pack_ordering_4x1x2() {
        // channels 0,1 are real parts, 2,3 imaginary; each channel is 1x2
        let t = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let z = pack_complex(&t, 4, 1, 2).unwrap();
        assert_eq!(z, vec![c(1.0, 5.0), c(2.0, 6.0), c(3.0, 7.0), c(4.0, 8.0)]);
    }

    #[test]
    fn pack_rejects_odd_channels() {
        assert!(matches!(pack_complex(&[1.0; 3], 3, 1, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn transmit_noiseless_limit() {
        let z = power_normalize(&[c(0.3, -1.0), c(2.0, 0.5), c(-0.1, 0.0)], 1.0).unwrap();
        let mut state = ChannelState::new(1e-20, 1.0, 3).unwrap();
        let y = state.transmit(&z, 3).unwrap();
        for (a, b) in y.iter().zip(z.values()) {
            assert!((a - b).norm() < 1e-8);
        }
    }

    #[test]
    fn transmit_rejects_length_mismatch() {
        let z = power_normalize(&[c(1.0, 0.0); 4], 1.0).unwrap();
        let mut state = ChannelState::new(1.0, 1.0, 0).unwrap();
        assert!(matches!(state.transmit(&z, 5), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn transmit_is_deterministic_per_seed() {
        let z = power_normalize(&[c(1.0, 1.0); 16], 1.0).unwrap();
        let run = |seed| ChannelState::new(0.5, 1.0, seed).unwrap().transmit(&z, 16).unwrap();
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn batch_path_matches_scalar_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let latents: Vec<f64> = (0..2 * 12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let z_tilde = Tensor::from_vec(latents.clone(), (2, 12), &Device::Cpu).unwrap();
        let z_batch = power_normalize_batch(&z_tilde, 2.0).unwrap();
        let mut rngs = vec![stream_rng(5, "t", 0), stream_rng(5, "t", 1)];
        let noise = unit_noise_batch(&mut rngs, 6, DType::F64).unwrap();
        let y_batch = add_noise_batch(&z_batch, &noise, &[0.3, 0.7]).unwrap();
        let y_batch: Vec<Vec<f64>> = y_batch.to_vec2().unwrap();

        for (row, sigma2) in [0.3f64, 0.7].into_iter().enumerate() {
            let packed = pack_complex(&latents[row * 12..(row + 1) * 12], 2, 1, 6).unwrap();
            let z = power_normalize(&packed, 2.0).unwrap();
            let mut noise_rng = stream_rng(5, "t", row as u64);
            let n = complex_noise(&mut noise_rng, 6);
            let y: Vec<Complex64> = z
                .values()
                .iter()
                .zip(n)
                .map(|(s, n)| s + n * sigma2.sqrt())
                .collect();
            let expected = unpack_complex(&y);
            for (a, b) in y_batch[row].iter().zip(expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_normalize_rejects_zero_row() {
        let z = Tensor::zeros((2, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(power_normalize_batch(&z, 1.0), Err(Error::DegenerateInput(_))));
    }

    proptest! {
        #[test]
        fn normalization_is_exact_and_scale_free(
            values in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..256),
            alpha in 1e-3f64..1e3,
            p_avg in 0.1f64..10.0,
        ) {
            let z: Vec<Complex64> = values.iter().map(|&(r, i)| c(r, i)).collect();
            prop_assume!(z.iter().any(|v| v.norm_sqr() > 1e-12));
            let a = power_normalize(&z, p_avg).unwrap();
            prop_assert!((a.average_power() - p_avg).abs() / p_avg < 1e-5);
            let scaled: Vec<Complex64> = z.iter().map(|v| v * alpha).collect();
            let b = power_normalize(&scaled, p_avg).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).norm() < 1e-6);
            }
        }

        #[test]
        fn snr_round_trip(snr in -20.0f64..40.0, p_avg in 0.01f64..100.0) {
            let back = sigma2_to_snr(snr_to_sigma2(snr, p_avg).unwrap(), p_avg).unwrap();
            prop_assert!((back - snr).abs() < 1e-9);
        }

        #[test]
        fn pack_unpack_round_trip(half in 1usize..4, h in 1usize..4, w in 1usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t: Vec<f64> = (0..2 * half * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let z = pack_complex(&t, 2 * half, h, w).unwrap();
            prop_assert_eq!(unpack_complex(&z), t);
        }
    }
}
