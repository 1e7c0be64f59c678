//! RGB images with values in `[0, 1]`, stored channel-major.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array3;

use crate::error::{dim_err, invalid, Result};

/// A 3-channel image, shape `(3, height, width)`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.shape()[0] != 3 {
            return dim_err(format!("image needs 3 channels, got {}", data.shape()[0]));
        }
        if data.shape()[1] == 0 || data.shape()[2] == 0 {
            return invalid("image must be non-empty");
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return invalid(format!("image value {v} outside [0, 1]"));
        }
        Ok(Self { data })
    }

    /// Builds an image without range validation. Values are clamped to `[0, 1]`.
    pub fn from_clamped(mut data: Array3<f64>) -> Self {
        assert_eq!(data.shape()[0], 3, "image needs 3 channels");
        data.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self { data }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self::from_clamped(Array3::from_elem((3, height, width), value))
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        Self::from_clamped(Array3::from_shape_fn((3, height, width), |(c, y, x)| f(c, y, x)))
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// Integer-aligned crop. The region must lie inside the image.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
        if width == 0 || height == 0 || x0 + width > self.width() || y0 + height > self.height() {
            return invalid(format!(
                "crop {width}x{height}+{x0}+{y0} outside {}x{} image",
                self.width(),
                self.height()
            ));
        }
        let view = self
            .data
            .slice(ndarray::s![.., y0..y0 + height, x0..x0 + width]);
        Ok(Image { data: view.to_owned() })
    }

    /// Samples a `out_size x out_size` patch covering the square region of side
    /// `side` centered at `(cx, cy)` with bilinear interpolation. Pixel `k` spans
    /// `[k, k + 1)`; samples outside the frame clamp to the nearest edge pixel.
    pub fn crop_resampled(&self, cx: f64, cy: f64, side_w: f64, side_h: f64, out_w: usize, out_h: usize) -> Image {
        let (h, w) = (self.height(), self.width());
        let x0 = cx - side_w / 2.0;
        let y0 = cy - side_h / 2.0;
        let sx = side_w / out_w as f64;
        let sy = side_h / out_h as f64;
        let mut out = Array3::zeros((3, out_h, out_w));
        for oy in 0..out_h {
            let fy = (y0 + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y_lo = fy.floor() as usize;
            let y_hi = (y_lo + 1).min(h - 1);
            let ty = fy - y_lo as f64;
            for ox in 0..out_w {
                let fx = (x0 + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x_lo = fx.floor() as usize;
                let x_hi = (x_lo + 1).min(w - 1);
                let tx = fx - x_lo as f64;
                for c in 0..3 {
                    let top = self.data[[c, y_lo, x_lo]] * (1.0 - tx) + self.data[[c, y_lo, x_hi]] * tx;
                    let bot = self.data[[c, y_hi, x_lo]] * (1.0 - tx) + self.data[[c, y_hi, x_hi]] * tx;
                    out[[c, oy, ox]] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
        Image::from_clamped(out)
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        if self.data.shape() != other.data.shape() {
            return dim_err(format!(
                "image shapes differ: {:?} vs {:?}",
                self.data.shape(),
                other.data.shape()
            ));
        }
        let n = self.data.len() as f64;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let mut img = RgbImage::new(self.width() as u32, self.height() as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            let (x, y) = (x as usize, y as usize);
            let q = |c: usize| (self.data[[c, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8;
            *px = Rgb([q(0), q(1), q(2)]);
        }
        img
    }

    pub fn from_rgb8(img: &RgbImage) -> Image {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
        });
        Image { data }
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path)?.to_rgb8();
        Ok(Image::from_rgb8(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}
