use candle_core::{DType, Device, Tensor, Var};
use candle_nn::VarMap;
use num_complex::Complex64;

use super::config::{ModelConfig, VariantKind};
use super::network::{Decoder, Encoder, FeaturePyramid};
use crate::channel::{add_noise_batch, pack_complex, power_normalize_batch, sigma2_to_snr, unpack_complex};
use crate::image_tensor::ImageTensor;
use crate::nn::ParamBuilder;
use crate::{Error, Result};

/// Parameter-name prefixes of the sub-networks.
pub mod prefix {
    pub const ENCODER: &str = "encoder";
    pub const SIDE_ENCODER: &str = "side_encoder";
    pub const TX_SIDE_ENCODER: &str = "tx_side_encoder";
    pub const DECODER: &str = "decoder";
}

#[derive(Debug, Clone)]
enum SideEncoders {
    None,
    /// Separate receiver-side parameters.
    Separate(Encoder),
    /// Receiver reuses the transmit encoder.
    Shared,
    /// Side image encoded at the transmitter and, independently, at the receiver.
    Cond { tx: Encoder, rx: Encoder },
}

/// A built codec: encoder, decoder and whatever side-information encoders the
/// variant needs, all backed by one parameter map.
#[derive(Clone)]
pub struct VariantModel {
    config: ModelConfig,
    dtype: DType,
    params: VarMap,
    encoder: Encoder,
    side: SideEncoders,
    decoder: Decoder,
}

impl std::fmt::Debug for VariantModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VariantModel")
            .field("config", &self.config)
            .field("dtype", &self.dtype)
            .field("parameters", &self.count_parameters())
            .finish_non_exhaustive()
    }
}

/// Output of one pass through encoder, channel and decoder.
#[derive(Debug, Clone)]
pub struct LinkOutput {
    /// Power-normalized channel input, `(B, 2k)` split-half.
    pub z: Tensor,
    pub x_hat: Tensor,
}

/// Single-precision model, the training default.
pub fn build_model(config: &ModelConfig) -> Result<VariantModel> {
    VariantModel::build(config, DType::F32)
}

impl VariantModel {
    pub fn build(config: &ModelConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let params = VarMap::new();
        let pb = ParamBuilder::new(params.clone(), config.init_seed, dtype);
        let (encoder, side) = match config.variant {
            VariantKind::Point2Point => (
                Encoder::new(&pb.pp(prefix::ENCODER), config, 1, true, false)?,
                SideEncoders::None,
            ),
            VariantKind::Wz => (
                Encoder::new(&pb.pp(prefix::ENCODER), config, 1, true, false)?,
                SideEncoders::Separate(Encoder::new(
                    &pb.pp(prefix::SIDE_ENCODER),
                    config,
                    1,
                    false,
                    false,
                )?),
            ),
            VariantKind::WzSm => (
                Encoder::new(&pb.pp(prefix::ENCODER), config, 2, true, false)?,
                SideEncoders::Shared,
            ),
            VariantKind::Cond => (
                Encoder::new(&pb.pp(prefix::ENCODER), config, 1, true, true)?,
                SideEncoders::Cond {
                    tx: Encoder::new(&pb.pp(prefix::TX_SIDE_ENCODER), config, 1, false, false)?,
                    rx: Encoder::new(&pb.pp(prefix::SIDE_ENCODER), config, 1, false, false)?,
                },
            ),
        };
        let decoder = Decoder::new(&pb.pp(prefix::DECODER), config, config.variant.uses_side_info())?;
        Ok(Self {
            config: config.clone(),
            dtype,
            params,
            encoder,
            side,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> VariantKind {
        self.config.variant
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Complex channel uses per image.
    pub fn channel_uses(&self) -> usize {
        self.config.channel_uses()
    }

    pub fn var_map(&self) -> &VarMap {
        &self.params
    }

    /// Trainable parameters, sorted by name.
    pub fn named_parameters(&self) -> Vec<(String, Var)> {
        let data = self.params.data().lock().expect("parameter map poisoned");
        let mut named: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        named.sort_by(|a, b| a.0.cmp(&b.0));
        named
    }

    /// Total trainable scalars; shared parameters are counted once.
    pub fn count_parameters(&self) -> usize {
        self.named_parameters().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Parameters used by the receiver to encode the side image.
    ///
    /// Under `WzSm` these are the transmit encoder's own variables.
    pub fn side_encoder_parameters(&self) -> Result<Vec<(String, Var)>> {
        let wanted = match self.side {
            SideEncoders::Separate(_) => prefix::SIDE_ENCODER,
            SideEncoders::Shared => prefix::ENCODER,
            _ => return Err(self.unsupported("side_encoder_parameters")),
        };
        Ok(self.parameters_under(wanted))
    }

    pub fn encoder_parameters(&self) -> Vec<(String, Var)> {
        self.parameters_under(prefix::ENCODER)
    }

    fn parameters_under(&self, root: &str) -> Vec<(String, Var)> {
        let dotted = format!("{root}.");
        self.named_parameters()
            .into_iter()
            .filter(|(n, _)| n.starts_with(&dotted))
            .collect()
    }

    fn unsupported(&self, op: &'static str) -> Error {
        Error::UnsupportedVariant {
            op,
            variant: self.config.variant.to_string(),
        }
    }

    fn check_images(&self, what: &str, x: &Tensor, batch: usize) -> Result<()> {
        let d = self.config.image_dims;
        let expected = [batch, d.channels, d.height, d.width];
        if x.dims() != expected {
            return Err(Error::invalid(format!(
                "{what} has shape {:?}, expected {expected:?}",
                x.dims()
            )));
        }
        Ok(())
    }

    /// `(B, 1)` SNR in dB, optionally with a constant role flag column.
    fn context(&self, sigma2: &[f64], flag: Option<bool>) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(sigma2.len() * 2);
        for &s in sigma2 {
            rows.push(sigma2_to_snr(s, self.config.p_avg)?);
            if let Some(f) = flag {
                rows.push(if f { 1.0 } else { 0.0 });
            }
        }
        let cols = if flag.is_some() { 2 } else { 1 };
        Ok(Tensor::from_vec(rows, (sigma2.len(), cols), &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    fn encoder_context(&self, sigma2: &[f64], side_flag: bool) -> Result<Tensor> {
        match self.side {
            SideEncoders::Shared => self.context(sigma2, Some(side_flag)),
            _ => self.context(sigma2, None),
        }
    }

    /// Transmitter encoding: `(B, C, H, W)` images to `(B, 2k)` unnormalized
    /// latents plus the encoder's own taps.
    ///
    /// `tx_side` is required for `Cond` and rejected otherwise. `side_flag` is
    /// only consulted by `WzSm` (`false` = source image).
    pub fn encode(
        &self,
        x: &Tensor,
        tx_side: Option<&Tensor>,
        sigma2: &[f64],
        side_flag: bool,
    ) -> Result<(Tensor, FeaturePyramid)> {
        let batch = sigma2.len();
        self.check_images("source batch", x, batch)?;
        let tx_pyramid = match (&self.side, tx_side) {
            (SideEncoders::Cond { tx, .. }, Some(s)) => {
                self.check_images("transmitter side batch", s, batch)?;
                Some(tx.forward(s, &self.context(sigma2, None)?, None)?.1)
            }
            (SideEncoders::Cond { .. }, None) => {
                return Err(Error::invalid("the cond variant encodes (x, x_side) jointly; x_side missing"))
            }
            (_, Some(_)) => {
                return Err(Error::invalid(format!(
                    "the {} variant has no transmitter-side information",
                    self.config.variant
                )))
            }
            (_, None) => None,
        };
        let context = self.encoder_context(sigma2, side_flag)?;
        let (latent, pyramid) = self.encoder.forward(x, &context, tx_pyramid.as_ref())?;
        let latent = latent.expect("transmit encoder has a head");
        Ok((latent.flatten_from(1)?, pyramid))
    }

    /// Receiver-side encoding of the side image (`Wz` and `WzSm` only).
    pub fn encode_side(&self, x_side: &Tensor, sigma2: &[f64]) -> Result<FeaturePyramid> {
        match self.side {
            SideEncoders::Separate(_) | SideEncoders::Shared => self.receiver_pyramid(x_side, sigma2),
            _ => Err(self.unsupported("encode_side")),
        }
    }

    fn receiver_pyramid(&self, x_side: &Tensor, sigma2: &[f64]) -> Result<FeaturePyramid> {
        self.check_images("side batch", x_side, sigma2.len())?;
        let (encoder, context) = match &self.side {
            SideEncoders::Separate(e) => (e, self.context(sigma2, None)?),
            SideEncoders::Shared => (&self.encoder, self.context(sigma2, Some(true))?),
            SideEncoders::Cond { rx, .. } => (rx, self.context(sigma2, None)?),
            SideEncoders::None => return Err(self.unsupported("receiver_pyramid")),
        };
        Ok(encoder.forward(x_side, &context, None)?.1)
    }

    /// Receiver: `(B, 2k)` channel output to `(B, C, H, W)` reconstructions.
    pub fn decode(&self, y: &Tensor, x_side: Option<&Tensor>, sigma2: &[f64]) -> Result<Tensor> {
        let batch = sigma2.len();
        let two_k = 2 * self.channel_uses();
        if y.dims() != [batch, two_k] {
            return Err(Error::invalid(format!(
                "channel output has shape {:?}, expected [{batch}, {two_k}]",
                y.dims()
            )));
        }
        let (gh, gw) = self.config.latent_grid();
        let grid = y.reshape((batch, self.config.latent_channels(), gh, gw))?;
        let context = self.context(sigma2, None)?;
        match (self.config.variant.uses_side_info(), x_side) {
            (true, Some(side)) => {
                let pyramid = self.receiver_pyramid(side, sigma2)?;
                self.decoder.forward(&grid, &context, Some((&pyramid, side)))
            }
            (false, None) => self.decoder.forward(&grid, &context, None),
            (true, None) => Err(Error::invalid(format!(
                "the {} variant needs side information at the decoder",
                self.config.variant
            ))),
            (false, Some(_)) => Err(Error::invalid(
                "the point2point decoder takes no side information",
            )),
        }
    }

    /// Encode, power-normalize, add `sqrt(σ²_b)·unit_noise_b`, decode.
    ///
    /// `x_side` is passed to whichever ends of the link use it.
    pub fn transmit(
        &self,
        x: &Tensor,
        x_side: Option<&Tensor>,
        sigma2: &[f64],
        unit_noise: &Tensor,
    ) -> Result<LinkOutput> {
        let tx_side = if self.config.variant == VariantKind::Cond { x_side } else { None };
        let rx_side = if self.config.variant.uses_side_info() { x_side } else { None };
        let (z_tilde, _) = self.encode(x, tx_side, sigma2, false)?;
        let z = power_normalize_batch(&z_tilde, self.config.p_avg)?;
        let y = add_noise_batch(&z, unit_noise, sigma2)?;
        let x_hat = self.decode(&y, rx_side, sigma2)?;
        Ok(LinkOutput { z, x_hat })
    }

    /// Single-image encoding to `k` complex values (before power normalization).
    pub fn encode_image(
        &self,
        x: &ImageTensor,
        tx_side: Option<&ImageTensor>,
        sigma2: f64,
        side_flag: bool,
    ) -> Result<Vec<Complex64>> {
        let xt = x.to_tensor(self.dtype)?;
        let st = tx_side.map(|s| s.to_tensor(self.dtype)).transpose()?;
        let (latent, _) = self.encode(&xt, st.as_ref(), &[sigma2], side_flag)?;
        let flat: Vec<f64> = latent.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let (gh, gw) = self.config.latent_grid();
        pack_complex(&flat, self.config.latent_channels(), gh, gw)
    }

    /// Single-image decoding of `k` received complex values.
    pub fn decode_symbols(
        &self,
        y: &[Complex64],
        x_side: Option<&ImageTensor>,
        sigma2: f64,
    ) -> Result<ImageTensor> {
        let k = self.channel_uses();
        if y.len() != k {
            return Err(Error::invalid(format!("received {} symbols, expected {k}", y.len())));
        }
        let yt = Tensor::from_vec(unpack_complex(y), (1, 2 * k), &Device::Cpu)?.to_dtype(self.dtype)?;
        let st = x_side.map(|s| s.to_tensor(self.dtype)).transpose()?;
        let out = self.decode(&yt, st.as_ref(), &[sigma2])?;
        Ok(ImageTensor::unstack(&out)?.remove(0))
    }
}
