//! Single-channel float rasters and PNG conversion.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Circular field of view of the probe inside the square raster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldOfView {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl FieldOfView {
    /// Circle inscribed in a `width` × `height` raster.
    pub fn inscribed(width: usize, height: usize) -> Self {
        FieldOfView {
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            radius: width.min(height) as f64 / 2.0,
        }
    }

    /// Whether the centre of pixel (x, y) lies inside the circle.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        dx * dx + dy * dy <= self.radius * self.radius
    }
}

/// Row-major grayscale image with values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
    fov: Option<FieldOfView>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::LengthMismatch {
                context: "image data",
                expected: width * height,
                found: data.len(),
            });
        }
        Ok(Image {
            width,
            height,
            data,
            fov: None,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Image {
            width,
            height,
            data: vec![value; width * height],
            fov: None,
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image {
            width,
            height,
            data,
            fov: None,
        }
    }

    pub fn with_fov(mut self, fov: Option<FieldOfView>) -> Self {
        self.fov = fov;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn fov(&self) -> Option<FieldOfView> {
        self.fov
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Whether pixel (x, y) is inside the field of view (always true without one).
    pub fn in_fov(&self, x: usize, y: usize) -> bool {
        self.fov.is_none_or(|f| f.contains(x, y))
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn ensure_same_dims(&self, other: &Image, context: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.dims(),
                found: other.dims(),
            });
        }
        Ok(())
    }

    /// Rectangular sub-image. The field of view is shifted into the crop.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::InvalidArgument(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        let fov = self.fov.map(|f| FieldOfView {
            cx: f.cx - x0 as f64,
            cy: f.cy - y0 as f64,
            radius: f.radius,
        });
        Ok(Image {
            width: w,
            height: h,
            data,
            fov,
        })
    }

    /// Mean over non-overlapping `factor` × `factor` blocks (trailing partial
    /// blocks are dropped).
    pub fn block_mean(&self, factor: usize) -> Result<Image> {
        if factor == 0 || self.width < factor || self.height < factor {
            return Err(Error::InvalidArgument(format!(
                "cannot block-average {}x{} by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = 1.0 / (factor * factor) as f64;
        Ok(Image::from_fn(w, h, |x, y| {
            let mut s = 0.0f64;
            for yy in y * factor..(y + 1) * factor {
                for xx in x * factor..(x + 1) * factor {
                    s += self.get(xx, yy) as f64;
                }
            }
            (s * norm) as f32
        }))
    }

    /// Loads an 8- or 16-bit PNG; colour images are converted to luma.
    /// Values are scaled by the maximum of the bit depth.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let img = image::open(path)?;
        let (data, w, h) = match img {
            DynamicImage::ImageLuma8(b) => {
                let (w, h) = b.dimensions();
                (
                    b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
                    w,
                    h,
                )
            }
            DynamicImage::ImageLuma16(b) => {
                let (w, h) = b.dimensions();
                (
                    b.into_raw()
                        .into_iter()
                        .map(|v| v as f32 / 65535.0)
                        .collect(),
                    w,
                    h,
                )
            }
            other if other.color().bits_per_pixel() / other.color().channel_count() as u16 > 8 => {
                let b = other.to_luma16();
                let (w, h) = b.dimensions();
                (
                    b.into_raw()
                        .into_iter()
                        .map(|v| v as f32 / 65535.0)
                        .collect(),
                    w,
                    h,
                )
            }
            other => {
                let b = other.to_luma8();
                let (w, h) = b.dimensions();
                (
                    b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
                    w,
                    h,
                )
            }
        };
        Image::new(w as usize, h as usize, data)
    }

    /// Writes a grayscale PNG (16-bit unless `eight_bit`), clamping to [0, 1].
    pub fn save_png(&self, path: impl AsRef<Path>, eight_bit: bool) -> Result<()> {
        let path = path.as_ref();
        let (w, h) = (self.width as u32, self.height as u32);
        if eight_bit {
            let raw: Vec<u8> = self
                .data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            let buf: ImageBuffer<Luma<u8>, _> =
                ImageBuffer::from_raw(w, h, raw).expect("buffer size matches dims");
            buf.save(path)?;
        } else {
            let raw: Vec<u16> = self
                .data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
                .collect();
            let buf: ImageBuffer<Luma<u16>, _> =
                ImageBuffer::from_raw(w, h, raw).expect("buffer size matches dims");
            buf.save(path)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_and_block_mean() {
        let img = Image::from_fn(8, 8, |x, y| (x + 8 * y) as f32);
        let c = img.crop(4, 4, 4, 4).unwrap();
        assert_eq!(c.get(0, 0), 36.0);
        let b = img.block_mean(4).unwrap();
        assert_eq!(b.dims(), (2, 2));
        // mean of x in 0..4 = 1.5, of 8y in 0..4 = 12
        assert_eq!(b.get(0, 0), 13.5);
        assert!(img.crop(6, 0, 4, 4).is_err());
    }

    #[test]
    fn fov_inscribed_excludes_corners() {
        let f = FieldOfView::inscribed(64, 64);
        assert!(f.contains(32, 32));
        assert!(!f.contains(0, 0));
    }

    #[test]
    fn png_round_trip_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Image::from_fn(5, 3, |x, y| (x * 3 + y) as f32 / 14.0);
        img.save_png(&p, false).unwrap();
        let back = Image::load_png(&p).unwrap();
        assert_eq!(back.dims(), (5, 3));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn png_8_bit_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.png");
        Image::new(2, 1, vec![0.0, 1.0])
            .unwrap()
            .save_png(&p, true)
            .unwrap();
        let back = Image::load_png(&p).unwrap();
        assert_eq!(back.data(), &[0.0, 1.0]);
    }
}
