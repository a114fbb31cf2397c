//! LPIPS-style perceptual distance.
//!
//! Features from a fixed convolutional stack are unit-normalized along the
//! channel axis at every tapped layer; the distance is the channel-weighted
//! squared difference, averaged over positions and summed over layers.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, D};
use candle_nn::VarMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::image_tensor::ImageTensor;
use crate::nn::{conv2d, leaky_relu, ParamBuilder};
use crate::{Error, Result};

/// Environment variable naming the asset cache directory.
pub const ASSET_DIR_ENV: &str = "DJSCC_ASSET_DIR";

/// File name of the converted AlexNet LPIPS weights inside the asset directory.
pub const ALEXNET_ASSET: &str = "lpips_alex.safetensors";

const NORM_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Seeded random three-layer stack; hermetic.
    Surrogate,
    /// Pretrained AlexNet features with the LPIPS linear heads.
    Alexnet,
}

impl Default for Backbone {
    fn default() -> Self {
        Backbone::Surrogate
    }
}

/// Which perceptual network to use, as written in experiment configs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LpipsConfig {
    #[serde(default)]
    pub backbone: Backbone,
    /// Surrogate initialization seed.
    #[serde(default)]
    pub seed: u64,
    /// AlexNet weight file; defaults to the asset directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asset: Option<PathBuf>,
}

impl LpipsConfig {
    pub fn build(&self, dtype: DType) -> Result<FeatureNet> {
        FeatureNet::load(self.backbone, self.seed, self.asset.as_deref(), dtype)
    }
}

#[derive(Debug, Clone, Copy)]
enum Activation {
    Relu,
    Leaky,
}

#[derive(Debug, Clone)]
struct Layer {
    /// Max pooling `(kernel, stride)` applied before the convolution.
    pool: Option<(usize, usize)>,
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
    act: Activation,
    /// Per-channel weights of the distance, shape `(1, C, 1, 1)`.
    lin: Tensor,
}

/// A frozen feature extractor for [`lpips_batch`].
#[derive(Debug, Clone)]
pub struct FeatureNet {
    backbone: Backbone,
    layers: Vec<Layer>,
    shift: Tensor,
    scale: Tensor,
    dtype: DType,
    provenance: String,
}

impl FeatureNet {
    /// Seeded surrogate with widths 16, 32, 32.
    pub fn surrogate(seed: u64, dtype: DType) -> Result<Self> {
        let pb = ParamBuilder::new(VarMap::new(), seed, dtype).pp("lpips_surrogate");
        let widths = [3, 16, 32, 32];
        let n = widths.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let (c_in, c_out) = (widths[i], widths[i + 1]);
            let bound = (6.0 / (c_in * 9) as f64).sqrt();
            let lpb = pb.pp(format!("layer{i}"));
            layers.push(Layer {
                pool: None,
                weight: lpb.uniform("weight", &[c_out, c_in, 3, 3], bound)?.detach(),
                bias: lpb.uniform("bias", &[c_out], 0.1)?.detach(),
                stride: if i == 0 { 1 } else { 2 },
                padding: 1,
                act: Activation::Leaky,
                lin: Tensor::full(1.0 / n as f64, (1, c_out, 1, 1), &Device::Cpu)?.to_dtype(dtype)?,
            });
        }
        let zeros = Tensor::zeros((1, 3, 1, 1), dtype, &Device::Cpu)?;
        Ok(Self {
            backbone: Backbone::Surrogate,
            layers,
            shift: zeros.clone(),
            scale: zeros.ones_like()?,
            dtype,
            provenance: format!("surrogate:seed={seed}"),
        })
    }

    /// Default location of the AlexNet asset: `$DJSCC_ASSET_DIR/lpips_alex.safetensors`,
    /// falling back to `./assets`.
    pub fn default_alexnet_path() -> PathBuf {
        std::env::var_os(ASSET_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("assets"))
            .join(ALEXNET_ASSET)
    }

    /// Loads AlexNet LPIPS weights from a safetensors file.
    ///
    /// Expected tensors: `features.{0,3,6,8,10}.{weight,bias}` (torchvision
    /// AlexNet layout) and `lin{0..4}.model.1.weight` of shape `(1, C, 1, 1)`.
    pub fn alexnet(path: &Path, dtype: DType) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::AssetNotFound {
                path: path.to_path_buf(),
                hint: format!(
                    "the LPIPS AlexNet weights are not bundled. Export torchvision's \
                     alexnet `features` convolutions and the LPIPS v0.1 `lin0..lin4` heads \
                     to safetensors under the names features.N.weight/bias and \
                     linN.model.1.weight, save the file as {ALEXNET_ASSET} in ${ASSET_DIR_ENV}, \
                     or select the surrogate backbone"
                ),
            },
            _ => Error::io(path, e),
        })?;
        let checksum = hex::encode(Sha256::digest(&bytes));
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let get = |name: &str| -> Result<Tensor> {
            tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("{}: missing tensor {name}", path.display())))?
                .to_dtype(dtype)
                .map_err(Error::from)
        };
        // (feature index, pooling before, stride, padding)
        let geometry: [(usize, Option<(usize, usize)>, usize, usize); 5] = [
            (0, None, 4, 2),
            (3, Some((3, 2)), 1, 2),
            (6, Some((3, 2)), 1, 1),
            (8, None, 1, 1),
            (10, None, 1, 1),
        ];
        let mut layers = Vec::with_capacity(geometry.len());
        for (l, (idx, pool, stride, padding)) in geometry.into_iter().enumerate() {
            layers.push(Layer {
                pool,
                weight: get(&format!("features.{idx}.weight"))?,
                bias: get(&format!("features.{idx}.bias"))?,
                stride,
                padding,
                act: Activation::Relu,
                lin: get(&format!("lin{l}.model.1.weight"))?,
            });
        }
        let column = |v: [f64; 3]| -> Result<Tensor> {
            Ok(Tensor::from_slice(&v, (1, 3, 1, 1), &Device::Cpu)?.to_dtype(dtype)?)
        };
        Ok(Self {
            backbone: Backbone::Alexnet,
            layers,
            shift: column([-0.030, -0.088, -0.188])?,
            scale: column([0.458, 0.448, 0.450])?,
            dtype,
            provenance: format!("sha256:{checksum}"),
        })
    }

    /// Builds the requested backbone; the AlexNet weights come from `asset`
    /// or the default asset path.
    pub fn load(backbone: Backbone, seed: u64, asset: Option<&Path>, dtype: DType) -> Result<Self> {
        match backbone {
            Backbone::Surrogate => Self::surrogate(seed, dtype),
            Backbone::Alexnet => {
                let path = asset.map(Path::to_path_buf).unwrap_or_else(Self::default_alexnet_path);
                Self::alexnet(&path, dtype)
            }
        }
    }

    pub fn backbone(&self) -> Backbone {
        self.backbone
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Seed of the surrogate or SHA-256 of the loaded weight file.
    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = ((x * 2.0)? - 1.0)?
            .broadcast_sub(&self.shift)?
            .broadcast_div(&self.scale)?;
        let mut taps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if let Some((k, s)) = layer.pool {
                h = h.max_pool2d_with_stride(k, s)?;
            }
            h = conv2d(&h, &layer.weight, layer.stride, layer.padding)?
                .broadcast_add(&layer.bias.reshape((1, (), 1, 1))?)?;
            h = match layer.act {
                Activation::Relu => h.relu()?,
                Activation::Leaky => leaky_relu(&h)?,
            };
            taps.push(h.clone());
        }
        Ok(taps)
    }
}

fn unit_normalize(f: &Tensor) -> candle_core::Result<Tensor> {
    let norm = (f.sqr()?.sum_keepdim(1)? + NORM_EPS)?.sqrt()?;
    f.broadcast_div(&norm)
}

/// Per-image distances `(B,)` between two `(B, 3, H, W)` batches in `[0, 1]`.
///
/// Differentiable in both arguments.
pub fn lpips_batch(net: &FeatureNet, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    if x.dims() != x_hat.dims() {
        return Err(Error::invalid(format!(
            "LPIPS inputs differ in shape: {:?} vs {:?}",
            x.dims(),
            x_hat.dims()
        )));
    }
    let (_, c, _, _) = x.dims4()?;
    if c != 3 {
        return Err(Error::invalid(format!("LPIPS expects RGB input, got {c} channels")));
    }
    let fa = net.features(&x.to_dtype(net.dtype)?)?;
    let fb = net.features(&x_hat.to_dtype(net.dtype)?)?;
    let mut total: Option<Tensor> = None;
    for ((a, b), layer) in fa.iter().zip(&fb).zip(&net.layers) {
        let diff = (unit_normalize(a)? - unit_normalize(b)?)?.sqr()?;
        let d = diff
            .broadcast_mul(&layer.lin)?
            .sum(1)?
            .flatten_from(1)?
            .mean(D::Minus1)?;
        total = Some(match total {
            Some(t) => (t + d)?,
            None => d,
        });
    }
    Ok(total.expect("feature net has at least one layer"))
}

/// Per-image distances for two equally long image lists.
pub fn lpips(net: &FeatureNet, x: &[ImageTensor], x_hat: &[ImageTensor]) -> Result<Vec<f64>> {
    if x.len() != x_hat.len() {
        return Err(Error::invalid(format!(
            "{} references vs {} reconstructions",
            x.len(),
            x_hat.len()
        )));
    }
    let mut out = Vec::with_capacity(x.len());
    for (a, b) in x.chunks(16).zip(x_hat.chunks(16)) {
        let ta = ImageTensor::stack(a, net.dtype)?;
        let tb = ImageTensor::stack(b, net.dtype)?;
        let d: Vec<f64> = lpips_batch(net, &ta, &tb)?.to_dtype(DType::F64)?.to_vec1()?;
        out.extend(d);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_tensor::ImageDims;
    use rand::{Rng, SeedableRng};

    fn random_batch(seed: u64, dims: (usize, usize, usize, usize)) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = dims.0 * dims.1 * dims.2 * dims.3;
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().to_vec1().unwrap()
    }

    #[test]
    fn zero_for_identical_and_symmetric() {
        let net = FeatureNet::surrogate(3, DType::F64).unwrap();
        let a = random_batch(1, (2, 3, 16, 16));
        let b = random_batch(2, (2, 3, 16, 16));
        assert!(values(&lpips_batch(&net, &a, &a).unwrap()).iter().all(|v| *v == 0.0));
        let ab = values(&lpips_batch(&net, &a, &b).unwrap());
        let ba = values(&lpips_batch(&net, &b, &a).unwrap());
        for (p, q) in ab.iter().zip(&ba) {
            assert!(*p > 0.0 && (p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn grows_with_corruption() {
        let net = FeatureNet::surrogate(0, DType::F64).unwrap();
        let d = ImageDims::new(3, 16, 32);
        let x = ImageTensor::from_fn(d, |c, y, xx| 0.5 + 0.3 * ((xx + c) as f32 * 0.5).sin() * (y as f32 * 0.3).cos()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let noise: Vec<f32> = (0..d.len()).map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal)).collect();
        let corrupt = |s: f32| {
            ImageTensor::new(d, x.data().iter().zip(&noise).map(|(v, n)| (v + s * n).clamp(0.0, 1.0)).collect()).unwrap()
        };
        let small = lpips(&net, &[x.clone()], &[corrupt(0.01)]).unwrap()[0];
        let large = lpips(&net, &[x.clone()], &[corrupt(0.1)]).unwrap()[0];
        assert!(large > small && small > 0.0, "{small} {large}");
    }

    #[test]
    fn permutation_equivariant() {
        let net = FeatureNet::surrogate(0, DType::F64).unwrap();
        let a = random_batch(4, (3, 3, 16, 16));
        let b = random_batch(5, (3, 3, 16, 16));
        let d = values(&lpips_batch(&net, &a, &b).unwrap());
        let idx = Tensor::new(&[2u32, 0, 1], &Device::Cpu).unwrap();
        let dp = values(&lpips_batch(&net, &a.index_select(&idx, 0).unwrap(), &b.index_select(&idx, 0).unwrap()).unwrap());
        assert_eq!(dp, vec![d[2], d[0], d[1]]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let net = FeatureNet::surrogate(1, DType::F64).unwrap();
        let x = random_batch(6, (1, 3, 16, 16));
        let x_hat = candle_core::Var::from_tensor(&random_batch(7, (1, 3, 16, 16))).unwrap();
        let loss = lpips_batch(&net, &x, x_hat.as_tensor()).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g: Vec<f64> = grads.get(x_hat.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let base: Vec<f64> = x_hat.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let eval = |v: &[f64]| -> f64 {
            let t = Tensor::from_slice(v, (1, 3, 16, 16), &Device::Cpu).unwrap();
            lpips_batch(&net, &x, &t).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        let h = 1e-5;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in (0..base.len()).step_by(37) {
            let mut p = base.clone();
            p[i] += h;
            let mut m = base.clone();
            m[i] -= h;
            let fd = (eval(&p) - eval(&m)) / (2.0 * h);
            num += (fd - g[i]).powi(2);
            den += fd.powi(2);
        }
        let rel = (num / den).sqrt();
        assert!(rel < 1e-2, "relative error {rel}");
    }

    #[test]
    fn missing_asset_is_reported_with_instructions() {
        let dir = tempfile::tempdir().unwrap();
        let err = FeatureNet::alexnet(&dir.path().join(ALEXNET_ASSET), DType::F32).unwrap_err();
        match err {
            Error::AssetNotFound { hint, .. } => assert!(hint.contains("safetensors")),
            other => panic!("unexpected {other}"),
        }
    }
}
