use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Channel-first image dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageDims {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for ImageDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A `C x H x W` image with pixel values in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    dims: ImageDims,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(dims: ImageDims, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::invalid(format!(
                "{} pixel values do not fill a {dims} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: ImageDims, value: f32) -> Result<Self> {
        Self::new(dims, vec![value; dims.len()])
    }

    pub fn from_fn(dims: ImageDims, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.len());
        for c in 0..dims.channels {
            for y in 0..dims.height {
                for x in 0..dims.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.dims.height + y) * self.dims.width + x]
    }

    /// Both spatial sides divisible by 16, as required by the four stride-2 stages.
    pub fn check_codec_compatible(&self) -> Result<()> {
        let d = self.dims;
        if d.height % 16 != 0 || d.width % 16 != 0 || d.height == 0 || d.width == 0 {
            return Err(Error::invalid(format!(
                "image {d} must have height and width divisible by 16"
            )));
        }
        Ok(())
    }

    /// `(1, C, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let d = self.dims;
        Ok(Tensor::from_slice(&self.data, (1, d.channels, d.height, d.width), &Device::Cpu)?
            .to_dtype(dtype)?)
    }

    /// Stacks equally-sized images into a `(B, C, H, W)` tensor.
    pub fn stack<'a>(images: impl IntoIterator<Item = &'a ImageTensor>, dtype: DType) -> Result<Tensor> {
        let mut dims = None;
        let mut data = Vec::new();
        let mut n = 0;
        for img in images {
            match dims {
                None => dims = Some(img.dims),
                Some(d) if d != img.dims => {
                    return Err(Error::invalid(format!(
                        "cannot batch images of dims {d} and {}",
                        img.dims
                    )))
                }
                _ => {}
            }
            data.extend_from_slice(&img.data);
            n += 1;
        }
        let d = dims.ok_or_else(|| Error::invalid("cannot batch zero images"))?;
        Ok(Tensor::from_vec(data, (n, d.channels, d.height, d.width), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Splits a `(B, C, H, W)` tensor into images, clamping to `[0, 1]`.
    pub fn unstack(batch: &Tensor) -> Result<Vec<ImageTensor>> {
        let (b, c, h, w) = batch.dims4()?;
        let dims = ImageDims::new(c, h, w);
        let flat: Vec<f32> = batch.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        Ok(flat
            .chunks(dims.len())
            .take(b)
            .map(|chunk| ImageTensor {
                dims,
                data: chunk.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_wrong_length() {
        let d = ImageDims::new(1, 1, 2);
        assert!(ImageTensor::new(d, vec![0.0, 1.5]).is_err());
        assert!(ImageTensor::new(d, vec![0.0]).is_err());
        assert!(ImageTensor::new(d, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn codec_compatibility_requires_multiple_of_16() {
        assert!(ImageTensor::filled(ImageDims::new(3, 16, 32), 0.5)
            .unwrap()
            .check_codec_compatible()
            .is_ok());
        assert!(ImageTensor::filled(ImageDims::new(3, 4, 4), 0.5)
            .unwrap()
            .check_codec_compatible()
            .is_err());
    }

    #[test]
    fn stack_unstack_round_trip() {
        let d = ImageDims::new(2, 2, 3);
        let a = ImageTensor::from_fn(d, |c, y, x| (c + y + x) as f32 / 10.0).unwrap();
        let b = ImageTensor::filled(d, 0.25).unwrap();
        let t = ImageTensor::stack([&a, &b], DType::F32).unwrap();
        assert_eq!(t.dims(), &[2, 2, 2, 3]);
        assert_eq!(ImageTensor::unstack(&t).unwrap(), vec![a, b]);
    }
}
