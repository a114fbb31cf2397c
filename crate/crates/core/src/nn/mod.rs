//! Network building blocks shared by the codec and the perceptual metric.

pub mod conv;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::VarMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::rng::stream_seed;

pub use conv::conv2d;

const LEAKY_SLOPE: f64 = 0.01;

/// Named, seeded parameter allocator backed by a [`VarMap`].
///
/// Each tensor is drawn from its own RNG stream keyed by (seed, full name), so
/// initialization does not depend on construction order.
#[derive(Clone)]
pub struct ParamBuilder {
    varmap: VarMap,
    prefix: String,
    seed: u64,
    dtype: DType,
}

impl ParamBuilder {
    pub fn new(varmap: VarMap, seed: u64, dtype: DType) -> Self {
        Self {
            varmap,
            prefix: String::new(),
            seed,
            dtype,
        }
    }

    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Self {
            prefix,
            ..self.clone()
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Uniform(-bound, bound) parameter of the given shape.
    pub fn uniform(&self, name: &str, dims: &[usize], bound: f64) -> candle_core::Result<Tensor> {
        let full = self.pp(name).prefix;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, &full, 0));
        let n: usize = dims.iter().product();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(full, Tensor::from_vec(values, dims, &Device::Cpu)?)
    }

    pub fn constant(&self, name: &str, dims: &[usize], value: f64) -> candle_core::Result<Tensor> {
        let full = self.pp(name).prefix;
        let t = (Tensor::ones(dims, DType::F64, &Device::Cpu)? * value)?;
        self.insert(full, t)
    }

    fn insert(&self, name: String, init: Tensor) -> candle_core::Result<Tensor> {
        let var = Var::from_tensor(&init.to_dtype(self.dtype)?)?;
        let mut data = self.varmap.data().lock().expect("parameter map poisoned");
        if data.contains_key(&name) {
            candle_core::bail!("parameter `{name}` allocated twice");
        }
        let t = var.as_tensor().clone();
        data.insert(name, var);
        Ok(t)
    }
}

pub fn leaky_relu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.maximum(&(x * LEAKY_SLOPE)?)
}

pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::sigmoid(x)
}

/// Depth-to-space: (B, C·r², H, W) -> (B, C, H·r, W·r).
pub fn pixel_shuffle(x: &Tensor, r: usize) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let out_c = c / (r * r);
    x.reshape((b, out_c, r, r, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, out_c, h * r, w * r))
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &ParamBuilder,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> candle_core::Result<Self> {
        Self::with_gain(pb, c_in, c_out, kernel, stride, 1.0, true)
    }

    /// He-uniform weights scaled by `gain`; zero bias when `bias` is set.
    pub fn with_gain(
        pb: &ParamBuilder,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        bias: bool,
    ) -> candle_core::Result<Self> {
        let bound = gain * (6.0 / (c_in * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: pb.uniform("weight", &[c_out, c_in, kernel, kernel], bound)?,
            bias: bias.then(|| pb.constant("bias", &[c_out], 0.0)).transpose()?,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?),
            None => Ok(y),
        }
    }
}

/// Initial weight scale of side-information branches relative to He-uniform.
pub const SIDE_INIT_GAIN: f64 = 0.1;

/// Convolution over `cat(x, side)`, stored as two kernels.
///
/// The main kernel has the name and shape of the side-free layer and so the
/// same initial values. The side kernel, `<name>_side`, is bias-free and
/// starts at [`SIDE_INIT_GAIN`] of the usual scale.
#[derive(Debug, Clone)]
pub struct FusedConv2d {
    main: Conv2d,
    side: Option<Conv2d>,
}

impl FusedConv2d {
    pub fn new(
        pb: &ParamBuilder,
        name: &str,
        c_in: usize,
        c_side: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> candle_core::Result<Self> {
        let side = (c_side > 0)
            .then(|| {
                Conv2d::with_gain(&pb.pp(format!("{name}_side")), c_side, c_out, kernel, stride, SIDE_INIT_GAIN, false)
            })
            .transpose()?;
        Ok(Self {
            main: Conv2d::new(&pb.pp(name), c_in, c_out, kernel, stride)?,
            side,
        })
    }

    pub fn forward(&self, x: &Tensor, side: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let y = self.main.forward(x)?;
        match (&self.side, side) {
            (Some(conv), Some(s)) => y + conv.forward(s)?,
            (None, None) => Ok(y),
            _ => candle_core::bail!("side input must be given exactly when the layer has a side kernel"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, d_in: usize, d_out: usize) -> candle_core::Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            weight: pb.uniform("weight", &[d_out, d_in], bound)?,
            bias: pb.uniform("bias", &[d_out], bound)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }

    #[cfg(test)]
    pub(crate) fn params(&self) -> (&Tensor, &Tensor) {
        (&self.weight, &self.bias)
    }
}

/// Two 3x3 convolutions with an identity skip.
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    pub fn new(pb: &ParamBuilder, channels: usize) -> candle_core::Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&pb.pp("conv1"), channels, channels, 3, 1)?,
            conv2: Conv2d::new(&pb.pp("conv2"), channels, channels, 3, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let h = leaky_relu(&self.conv1.forward(x)?)?;
        leaky_relu(&(x + self.conv2.forward(&h)?)?)
    }
}

/// Bottleneck residual unit (1x1 -> 3x3 -> 1x1).
#[derive(Debug, Clone)]
struct BottleneckUnit {
    reduce: Conv2d,
    spatial: Conv2d,
    expand: Conv2d,
}

impl BottleneckUnit {
    fn new(pb: &ParamBuilder, channels: usize) -> candle_core::Result<Self> {
        let mid = (channels / 2).max(1);
        Ok(Self {
            reduce: Conv2d::new(&pb.pp("reduce"), channels, mid, 1, 1)?,
            spatial: Conv2d::new(&pb.pp("spatial"), mid, mid, 3, 1)?,
            expand: Conv2d::new(&pb.pp("expand"), mid, channels, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let h = leaky_relu(&self.reduce.forward(x)?)?;
        let h = leaky_relu(&self.spatial.forward(&h)?)?;
        x + self.expand.forward(&h)?
    }
}

/// Simplified attention: `x + trunk(x) * sigmoid(mask(x))`, no non-local block.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    trunk: BottleneckUnit,
    mask: BottleneckUnit,
    mask_out: Conv2d,
}

impl AttentionBlock {
    pub fn new(pb: &ParamBuilder, channels: usize) -> candle_core::Result<Self> {
        Ok(Self {
            trunk: BottleneckUnit::new(&pb.pp("trunk"), channels)?,
            mask: BottleneckUnit::new(&pb.pp("mask"), channels)?,
            mask_out: Conv2d::new(&pb.pp("mask_out"), channels, channels, 1, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let gate = sigmoid(&self.mask_out.forward(&self.mask.forward(x)?)?)?;
        x + (self.trunk.forward(x)? * gate)?
    }
}

/// SNR-conditioned channel gating.
///
/// Global-average-pools the feature map, appends the context scalars (channel
/// SNR in dB, optionally a role flag), and maps them through a two-layer MLP to
/// per-channel sigmoid gates that rescale the input.
#[derive(Debug, Clone)]
pub struct AfModule {
    fc1: Linear,
    fc2: Linear,
}

impl AfModule {
    pub fn new(pb: &ParamBuilder, channels: usize, context_dims: usize) -> candle_core::Result<Self> {
        Ok(Self {
            fc1: Linear::new(&pb.pp("fc1"), channels + context_dims, channels)?,
            fc2: Linear::new(&pb.pp("fc2"), channels, channels)?,
        })
    }

    /// `context` is (B, context_dims).
    pub fn forward(&self, x: &Tensor, context: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let pooled = x.flatten_from(2)?.mean(D::Minus1)?;
        let h = Tensor::cat(&[&pooled, context], 1)?;
        let h = leaky_relu(&self.fc1.forward(&h)?)?;
        let gates = sigmoid(&self.fc2.forward(&h)?)?;
        x.broadcast_mul(&gates.reshape((b, c, 1, 1))?)
    }

    #[cfg(test)]
    pub(crate) fn output_layer(&self) -> &Linear {
        &self.fc2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn builder(dtype: DType) -> ParamBuilder {
        ParamBuilder::new(VarMap::new(), 7, dtype)
    }

    fn to_vec(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap()
    }

    fn context(snr_db: f64, batch: usize) -> Tensor {
        Tensor::full(snr_db, (batch, 1), &Device::Cpu).unwrap()
    }

    #[test]
    fn initialization_is_order_independent() {
        let a = builder(DType::F64);
        let w1 = a.uniform("x", &[4], 1.0).unwrap();
        let _ = a.uniform("y", &[4], 1.0).unwrap();
        let b = builder(DType::F64);
        let _ = b.uniform("y", &[4], 1.0).unwrap();
        let w2 = b.uniform("x", &[4], 1.0).unwrap();
        assert_eq!(to_vec(&w1), to_vec(&w2));
    }

    #[test]
    fn duplicate_parameter_names_rejected() {
        let pb = builder(DType::F32);
        pb.uniform("w", &[2], 1.0).unwrap();
        assert!(pb.uniform("w", &[2], 1.0).is_err());
    }

    #[test]
    fn pixel_shuffle_places_subpixels() {
        // one output channel, 2x2 input grid of 4 sub-pixel planes
        let x = Tensor::arange(0f64, 16.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 4, 2, 2))
            .unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 1, 4, 4]);
        let rows: Vec<Vec<f64>> = y.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        // plane p = 2*dy + dx holds the value at (2y+dy, 2x+dx)
        assert_eq!(rows[0], vec![0.0, 4.0, 1.0, 5.0]);
        assert_eq!(rows[1], vec![8.0, 12.0, 9.0, 13.0]);
    }

    #[test]
    fn af_module_preserves_shape() {
        let pb = builder(DType::F64);
        let af = AfModule::new(&pb, 6, 1).unwrap();
        for &(h, w) in &[(8, 16), (1, 2), (4, 4)] {
            let x = Tensor::randn(0f64, 1.0, (3, 6, h, w), &Device::Cpu).unwrap();
            let y = af.forward(&x, &context(0.0, 3)).unwrap();
            assert_eq!(y.dims(), x.dims());
        }
    }

    #[test]
    fn af_module_saturated_gates_are_identity() {
        let pb = builder(DType::F64);
        let af = AfModule::new(&pb, 5, 1).unwrap();
        let (w, b) = af.output_layer().params();
        // Params are Var-backed; overwrite in place through the var map.
        let vars = pb.varmap.data().lock().unwrap();
        for var in vars.values() {
            if var.as_tensor().id() == w.id() {
                var.set(&w.zeros_like().unwrap()).unwrap();
            }
            if var.as_tensor().id() == b.id() {
                var.set(&(b.ones_like().unwrap() * 60.0).unwrap()).unwrap();
            }
        }
        drop(vars);
        let x = Tensor::randn(0f64, 1.0, (2, 5, 4, 8), &Device::Cpu).unwrap();
        let y = af.forward(&x, &context(3.0, 2)).unwrap();
        assert_eq!(to_vec(&x), to_vec(&y));
    }

    #[test]
    fn af_module_output_depends_on_snr() {
        let pb = builder(DType::F64);
        let af = AfModule::new(&pb, 8, 1).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 8, 4, 4), &Device::Cpu).unwrap();
        let h = 1e-4;
        let up = to_vec(&af.forward(&x, &context(1.0 + h, 1)).unwrap());
        let down = to_vec(&af.forward(&x, &context(1.0 - h, 1)).unwrap());
        let deriv: f64 = up
            .iter()
            .zip(&down)
            .map(|(a, b)| ((a - b) / (2.0 * h)).abs())
            .sum();
        assert!(deriv > 1e-6, "d output / d snr = {deriv}");
    }

    #[test]
    fn attention_and_resblock_preserve_shape() {
        let pb = builder(DType::F32);
        let attn = AttentionBlock::new(&pb.pp("a"), 8).unwrap();
        let res = ResBlock::new(&pb.pp("r"), 8).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 8, 4, 8), &Device::Cpu).unwrap();
        assert_eq!(attn.forward(&x).unwrap().dims(), x.dims());
        assert_eq!(res.forward(&x).unwrap().dims(), x.dims());
    }
}
