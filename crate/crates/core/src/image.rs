//! Floating-point RGB images.
//!
//! Pixel values are `f64`, interleaved RGB, row-major. Rendered images live
//! in `[0, 1]`; difference images (makeup perturbations) may be signed.

use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image size {0}x{1} does not match {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("data length {len} does not match {width}x{height}x3")]
    DataLength {
        width: usize,
        height: usize,
        len: usize,
    },
    #[error("png: {0}")]
    Png(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Rgb = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != width * height * 3 {
            return Err(ImageError::DataLength {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, c: Rgb) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Bilinear sample at continuous coordinates with pixel centers at
    /// integer positions. Samples outside the image read as `fill`.
    pub fn sample_bilinear(&self, x: f64, y: f64, fill: Rgb) -> Rgb {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let get = |xi: isize, yi: isize| -> Rgb {
            if xi < 0 || yi < 0 || xi >= self.width as isize || yi >= self.height as isize {
                fill
            } else {
                self.pixel(xi as usize, yi as usize)
            }
        };
        let p00 = get(x0, y0);
        let p10 = get(x0 + 1, y0);
        let p01 = get(x0, y0 + 1);
        let p11 = get(x0 + 1, y0 + 1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] + (p10[c] - p00[c]) * fx;
            let bot = p01[c] + (p11[c] - p01[c]) * fx;
            out[c] = top + (bot - top) * fy;
        }
        out
    }

    /// `self - other`, the signed perturbation between two images.
    pub fn diff(&self, other: &Image) -> Result<Image, ImageError> {
        if !self.same_size(other) {
            return Err(ImageError::SizeMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(Image {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64, ImageError> {
        let d = self.diff(other)?;
        Ok(d.data.iter().map(|v| v.abs()).sum::<f64>() / d.data.len().max(1) as f64)
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Resamples to a new size (pixel-center aligned bilinear).
    pub fn resize(&self, width: usize, height: usize) -> Image {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Image::filled(width, height, [0.0; 3]);
        for y in 0..height {
            let src_y = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..width {
                let src_x = (x as f64 + 0.5) * sx - 0.5;
                let c = self.sample_bilinear(
                    src_x.clamp(0.0, (self.width - 1) as f64),
                    src_y.clamp(0.0, (self.height - 1) as f64),
                    [0.0; 3],
                );
                out.set_pixel(x, y, c);
            }
        }
        out
    }

    /// `[height, width, 3]` tensor view used as model input.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, 3], self.data.clone())
            .expect("image data matches its shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Image, ImageError> {
        let s = t.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(ImageError::DataLength {
                width: 0,
                height: 0,
                len: t.len(),
            });
        }
        Image::new(s[1], s[0], t.data().to_vec())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn to_png(&self) -> Result<Vec<u8>, ImageError> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| ImageError::Png("buffer size".into()))?;
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| ImageError::Png(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn from_png(bytes: &[u8]) -> Result<Image, ImageError> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| ImageError::Png(e.to_string()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
        Image::new(w as usize, h as usize, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        std::fs::write(path, self.to_png()?)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Image, ImageError> {
        Image::from_png(&std::fs::read(path)?)
    }
}

/// Single-channel image (heatmaps, masks) encoded as 8-bit grayscale PNG.
pub fn gray_png(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>, ImageError> {
    if values.len() != width * height {
        return Err(ImageError::DataLength {
            width,
            height,
            len: values.len(),
        });
    }
    let raw: Vec<u8> = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| ImageError::Png("buffer size".into()))?;
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| ImageError::Png(e.to_string()))?;
    Ok(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_keeps_8bit_values() {
        let mut img = Image::filled(4, 3, [0.0; 3]);
        img.set_pixel(1, 2, [1.0, 0.5, 0.2]);
        let back = Image::from_png(&img.to_png().unwrap()).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let mut img = Image::filled(5, 4, [0.1, 0.2, 0.3]);
        img.set_pixel(2, 1, [0.9, 0.8, 0.7]);
        assert_eq!(img.resize(5, 4), img);
    }
}
