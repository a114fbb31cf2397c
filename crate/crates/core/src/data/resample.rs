//! Area resampling and the two datasets' preprocessing.

use std::ops::Range;
use std::path::Path;

use image::DynamicImage;

use crate::image_tensor::{ImageDims, ImageTensor};
use crate::{Error, Result};

/// Output size of both preprocessing pipelines.
pub const PAPER_HEIGHT: usize = 128;
pub const PAPER_WIDTH: usize = 256;

const KITTI_CROP_HEIGHT: usize = 370;
const KITTI_CROP_WIDTH: usize = 740;

/// `(input index, weight)` lists, one per output sample: each output cell
/// averages the input cells it overlaps, weighted by overlap length.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n_in);
            (first..last)
                .filter_map(|j| {
                    let overlap = (hi.min((j + 1) as f64) - lo.max(j as f64)).max(0.0);
                    (overlap > 0.0).then_some((j, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Box-filter resampling to `height x width`. Constants are preserved exactly
/// up to rounding, and integer downscaling averages whole blocks.
pub fn area_resample(img: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    let d = img.dims();
    if height == 0 || width == 0 || d.height == 0 || d.width == 0 {
        return Err(Error::invalid(format!("cannot resample {d} to {height}x{width}")));
    }
    let wy = area_weights(d.height, height);
    let wx = area_weights(d.width, width);
    let mut out = Vec::with_capacity(d.channels * height * width);
    let mut rows = vec![0.0f64; height * d.width];
    for c in 0..d.channels {
        let plane = &img.data()[c * d.height * d.width..(c + 1) * d.height * d.width];
        for (oy, taps) in wy.iter().enumerate() {
            for x in 0..d.width {
                rows[oy * d.width + x] = taps
                    .iter()
                    .map(|&(y, w)| w * f64::from(plane[y * d.width + x]))
                    .sum();
            }
        }
        for oy in 0..height {
            for taps in &wx {
                let v: f64 = taps.iter().map(|&(x, w)| w * rows[oy * d.width + x]).sum();
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    ImageTensor::new(ImageDims::new(d.channels, height, width), out)
}

pub fn crop(img: &ImageTensor, rows: Range<usize>, cols: Range<usize>) -> Result<ImageTensor> {
    let d = img.dims();
    if rows.end > d.height || cols.end > d.width || rows.is_empty() || cols.is_empty() {
        return Err(Error::invalid(format!(
            "crop rows {rows:?} cols {cols:?} outside {d}"
        )));
    }
    let out_dims = ImageDims::new(d.channels, rows.len(), cols.len());
    ImageTensor::from_fn(out_dims, |c, y, x| img.get(c, rows.start + y, cols.start + x))
}

/// Centre-crop window for a KITTI frame: the half-margins are floored.
pub fn kitti_crop_window(height: usize, width: usize) -> Result<(Range<usize>, Range<usize>)> {
    if height < KITTI_CROP_HEIGHT || width < KITTI_CROP_WIDTH {
        return Err(Error::invalid(format!(
            "KITTI frame must be at least {KITTI_CROP_HEIGHT}x{KITTI_CROP_WIDTH}, got {height}x{width}"
        )));
    }
    let top = (height - KITTI_CROP_HEIGHT) / 2;
    let left = (width - KITTI_CROP_WIDTH) / 2;
    Ok((top..top + KITTI_CROP_HEIGHT, left..left + KITTI_CROP_WIDTH))
}

fn check_rgb(img: &ImageTensor) -> Result<()> {
    if img.dims().channels != 3 {
        return Err(Error::invalid(format!(
            "expected an RGB image, got {} channels",
            img.dims().channels
        )));
    }
    Ok(())
}

/// Centre crop to 370x740, then area-resample to 128x256.
pub fn preprocess_kitti(img: &ImageTensor) -> Result<ImageTensor> {
    check_rgb(img)?;
    let d = img.dims();
    let (rows, cols) = kitti_crop_window(d.height, d.width)?;
    area_resample(&crop(img, rows, cols)?, PAPER_HEIGHT, PAPER_WIDTH)
}

/// Area-resample directly to 128x256.
pub fn preprocess_cityscape(img: &ImageTensor) -> Result<ImageTensor> {
    check_rgb(img)?;
    area_resample(img, PAPER_HEIGHT, PAPER_WIDTH)
}

/// Reads an RGB image (8 or 16 bit) into `[0, 1]`. Grey or alpha images are rejected.
pub fn load_rgb(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?;
    match img {
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgb32F(_) => {}
        other => {
            return Err(Error::invalid(format!(
                "{}: expected an RGB image, got {:?}",
                path.display(),
                other.color()
            )))
        }
    }
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let dims = ImageDims::new(3, h, w);
    let raw = rgb.as_raw();
    ImageTensor::from_fn(dims, |c, y, x| raw[(y * w + x) * 3 + c].clamp(0.0, 1.0))
}

/// Writes an image as 8-bit PNG (values rounded to the nearest level).
pub fn save_png(img: &ImageTensor, path: &Path) -> Result<()> {
    let d = img.dims();
    if d.channels != 3 {
        return Err(Error::invalid(format!("PNG export expects RGB, got {d}")));
    }
    let mut buf = image::RgbImage::new(d.width as u32, d.height as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            px.0[c] = (img.get(c, y as usize, x as usize) * 255.0).round() as u8;
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kitti_offsets() {
        let (rows, cols) = kitti_crop_window(375, 1242).unwrap();
        assert_eq!(rows, 2..372);
        assert_eq!(cols, 251..991);
        assert!(kitti_crop_window(369, 1242).is_err());
    }

    #[test]
    fn kitti_output_shape_and_constant_preservation() {
        let img = ImageTensor::filled(ImageDims::new(3, 375, 1242), 0.3).unwrap();
        let out = preprocess_kitti(&img).unwrap();
        assert_eq!(out.dims(), ImageDims::new(3, 128, 256));
        assert!(out.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn kitti_rejects_undersized_input_with_dims() {
        let img = ImageTensor::filled(ImageDims::new(3, 300, 800), 0.3).unwrap();
        let err = preprocess_kitti(&img).unwrap_err().to_string();
        assert!(err.contains("300x800"), "{err}");
    }

    #[test]
    fn cityscape_checkerboard_becomes_mid_gray() {
        let img =
            ImageTensor::from_fn(ImageDims::new(3, 1024, 2048), |_, y, x| ((x + y) % 2) as f32).unwrap();
        let out = preprocess_cityscape(&img).unwrap();
        assert_eq!(out.dims(), ImageDims::new(3, 128, 256));
        assert!(out.data().iter().all(|v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn cityscape_rejects_grey() {
        let img = ImageTensor::filled(ImageDims::new(1, 64, 64), 0.5).unwrap();
        assert!(preprocess_cityscape(&img).is_err());
    }

    #[test]
    fn fractional_weights_sum_to_one() {
        for (n_in, n_out) in [(370, 128), (740, 256), (5, 3), (3, 7)] {
            for taps in area_weights(n_in, n_out) {
                let s: f64 = taps.iter().map(|t| t.1).sum();
                assert!((s - 1.0).abs() < 1e-12, "{n_in}->{n_out}: {s}");
            }
        }
    }

    #[test]
    fn png_round_trip_at_8_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = ImageTensor::from_fn(ImageDims::new(3, 4, 5), |c, y, x| ((c * 20 + y * 5 + x) as f32) / 255.0).unwrap();
        save_png(&img, &path).unwrap();
        let back = load_rgb(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
