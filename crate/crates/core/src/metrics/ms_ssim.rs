use crate::image_tensor::ImageTensor;
use crate::{Error, Result};

/// Smallest accepted image side.
pub const MS_SSIM_MIN_SIDE: usize = 16;

/// Side length from which the standard five scales are used.
const FULL_SCALE_MIN_SIDE: usize = 160;

const SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Number of scales used for an image of the given size.
pub fn ms_ssim_scales(height: usize, width: usize) -> Result<usize> {
    let side = height.min(width);
    if side < MS_SSIM_MIN_SIDE {
        return Err(Error::invalid(format!(
            "MS-SSIM needs images of at least {MS_SSIM_MIN_SIDE}x{MS_SSIM_MIN_SIDE}, got {height}x{width}"
        )));
    }
    Ok(if side >= FULL_SCALE_MIN_SIDE { 5 } else { 3 })
}

/// Truncated, normalized 1-D Gaussian; the 11-tap window shrinks to the
/// largest odd size that fits the plane.
fn gaussian(side: usize) -> Vec<f64> {
    let size = if side >= WINDOW { WINDOW } else { (side - 1) | 1 };
    let half = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SIGMA * SIGMA)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|v| v / sum).collect()
}

#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn map2(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            v: self.v.iter().zip(&other.v).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Separable valid filtering.
    fn filter(&self, k: &[f64]) -> Plane {
        let n = k.len();
        let ow = self.w + 1 - n;
        let oh = self.h + 1 - n;
        let mut rows = vec![0.0; self.h * ow];
        for y in 0..self.h {
            for x in 0..ow {
                rows[y * ow + x] = (0..n).map(|i| k[i] * self.v[y * self.w + x + i]).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
            }
        }
        Plane { h: oh, w: ow, v: out }
    }

    /// 2x2 average pooling, dropping a trailing odd row or column.
    fn downsample(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let at = |dy: usize, dx: usize| self.v[(2 * y + dy) * self.w + 2 * x + dx];
                v.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0);
            }
        }
        Plane { h, w, v }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean SSIM and mean contrast-structure term at one scale.
fn ssim_terms(a: &Plane, b: &Plane) -> (f64, f64) {
    let k = gaussian(a.h.min(a.w));
    let mu_a = a.filter(&k);
    let mu_b = b.filter(&k);
    let aa = a.map2(a, |p, q| p * q).filter(&k);
    let bb = b.map2(b, |p, q| p * q).filter(&k);
    let ab = a.map2(b, |p, q| p * q).filter(&k);
    let mut ssim = Vec::with_capacity(mu_a.v.len());
    let mut cs = Vec::with_capacity(mu_a.v.len());
    for i in 0..mu_a.v.len() {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let var_a = aa.v[i] - ma * ma;
        let var_b = bb.v[i] - mb * mb;
        let cov = ab.v[i] - ma * mb;
        let c = (2.0 * cov + C2) / (var_a + var_b + C2);
        let l = (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
        cs.push(c);
        ssim.push(l * c);
    }
    (mean(&ssim), mean(&cs))
}

fn channel_ms_ssim(mut a: Plane, mut b: Plane, scales: usize) -> f64 {
    let weights = &SCALE_WEIGHTS[..scales];
    let total: f64 = weights.iter().sum();
    let mut value = 1.0;
    for (j, w) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_terms(&a, &b);
        let term = if j + 1 == scales { ssim } else { cs };
        // Negative correlations are clipped so fractional powers stay real.
        value *= term.max(0.0).powf(w / total);
        if j + 1 < scales {
            a = a.downsample();
            b = b.downsample();
        }
    }
    value
}

/// Multi-scale SSIM on `[0, 1]` images, averaged over channels.
///
/// Three scales below 160 pixels per side, five from there on; scale
/// weights are the standard ones renormalized to the scales in use.
pub fn ms_ssim(x: &ImageTensor, x_hat: &ImageTensor) -> Result<f64> {
    let d = x.dims();
    if d != x_hat.dims() {
        return Err(Error::invalid(format!(
            "image dims differ: {d} vs {}",
            x_hat.dims()
        )));
    }
    let scales = ms_ssim_scales(d.height, d.width)?;
    let plane = d.height * d.width;
    let to_plane = |img: &ImageTensor, c: usize| Plane {
        h: d.height,
        w: d.width,
        v: img.data()[c * plane..(c + 1) * plane].iter().map(|&v| f64::from(v)).collect(),
    };
    let total: f64 = (0..d.channels)
        .map(|c| channel_ms_ssim(to_plane(x, c), to_plane(x_hat, c), scales))
        .sum();
    Ok((total / d.channels as f64).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_tensor::ImageDims;

    fn textured(d: ImageDims) -> ImageTensor {
        ImageTensor::from_fn(d, |c, y, x| {
            (0.5 + 0.3 * ((x as f32 * 0.7 + c as f32).sin() * (y as f32 * 0.4).cos())).clamp(0.0, 1.0)
        })
        .unwrap()
    }

    #[test]
    fn identity_is_one() {
        for d in [ImageDims::new(3, 16, 32), ImageDims::new(1, 160, 176)] {
            let x = textured(d);
            assert!((ms_ssim(&x, &x).unwrap() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn inverted_checkerboard_scores_low() {
        let d = ImageDims::new(3, 32, 32);
        let x = ImageTensor::from_fn(d, |_, y, x| if (y / 2 + x / 2) % 2 == 0 { 0.9 } else { 0.1 }).unwrap();
        let inv = ImageTensor::new(d, x.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        let v = ms_ssim(&x, &inv).unwrap();
        assert!(v < 0.5, "{v}");
    }

    #[test]
    fn joint_luminance_shift_is_minor() {
        let d = ImageDims::new(3, 32, 32);
        let x = textured(d);
        let y = ImageTensor::new(d, x.data().iter().map(|v| (v * 0.9 + 0.02).min(1.0)).collect()).unwrap();
        let shift = |img: &ImageTensor| ImageTensor::new(d, img.data().iter().map(|v| v + 0.01).collect()).unwrap();
        let before = ms_ssim(&x, &y).unwrap();
        let after = ms_ssim(&shift(&x), &shift(&y)).unwrap();
        assert!((before - after).abs() < 0.05, "{before} {after}");
    }

    #[test]
    fn symmetric_and_bounded() {
        let d = ImageDims::new(3, 16, 32);
        let x = textured(d);
        let y = ImageTensor::from_fn(d, |c, yy, xx| ((c + yy * xx) % 7) as f32 / 7.0).unwrap();
        let a = ms_ssim(&x, &y).unwrap();
        let b = ms_ssim(&y, &x).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn too_small_images_name_the_minimum() {
        let x = ImageTensor::filled(ImageDims::new(3, 8, 32), 0.5).unwrap();
        let err = ms_ssim(&x, &x).unwrap_err().to_string();
        assert!(err.contains("16x16"), "{err}");
    }

    #[test]
    fn scale_count_depends_on_size() {
        assert_eq!(ms_ssim_scales(16, 32).unwrap(), 3);
        assert_eq!(ms_ssim_scales(128, 256).unwrap(), 3);
        assert_eq!(ms_ssim_scales(160, 160).unwrap(), 5);
    }
}
