//! Image and mask containers plus their on-disk PNG/JPEG codecs.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::imgproc::{flip_plane, resize_plane, Interp};
use crate::tensor::Tensor;

/// Minimum side length accepted for images entering the pipeline.
pub const MIN_SIDE: usize = 8;

/// Planar RGB image with values in `[0, 1]`, stored channel-major (`3×H×W`).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageRgb {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::shape(format!(
                "image buffer has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("image value {v} outside [0,1]")));
        }
        Ok(ImageRgb {
            height,
            width,
            data,
        })
    }

    /// Builds an image from arbitrary values, clamping into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Self {
        assert_eq!(data.len(), 3 * height * width);
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        ImageRgb {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ImageRgb {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let len = self.height * self.width;
        &self.data[c * len..(c + 1) * len]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let len = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[len + i], self.data[2 * len + i]]
    }

    /// Resizes each channel and clamps the result back into `[0, 1]`.
    pub fn resized(&self, height: usize, width: usize, interp: Interp) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            data.extend(resize_plane(
                self.channel(c),
                self.height,
                self.width,
                height,
                width,
                interp,
            ));
        }
        Self::from_clamped(height, width, data)
    }

    pub fn flipped(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..3 {
            data.extend(flip_plane(self.channel(c), self.height, self.width));
        }
        ImageRgb {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec([1, 3, self.height, self.width], self.data.clone())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::invalid(format!(
                "{}: image {w}x{h} smaller than {MIN_SIDE}x{MIN_SIDE}",
                path.display()
            )));
        }
        let mut data = vec![0.0f32; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..3 {
                data[c * h * w + i] = px[c] as f32 / 255.0;
            }
        }
        Ok(ImageRgb {
            height: h,
            width: w,
            data,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.pixel(y, x).map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8);
                img.put_pixel(x as u32, y as u32, Rgb(p));
            }
        }
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Binary segmentation mask; every pixel is exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "mask buffer has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        if let Some((index, &v)) = data.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(Error::NonBinaryMask {
                value: v as f32,
                index,
            });
        }
        Ok(BinaryMask {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    /// Foreground where `values[p] > threshold`.
    pub fn from_threshold(height: usize, width: usize, values: &[f32], threshold: f32) -> Self {
        assert_eq!(values.len(), height * width);
        BinaryMask {
            height,
            width,
            data: values.iter().map(|&v| u8::from(v > threshold)).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = u8::from(v);
    }

    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn flipped(&self) -> Self {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: flip_plane(&self.data, self.height, self.width),
        }
    }

    /// Loads a single-channel (or RGB) PNG, marking pixels whose normalized
    /// intensity exceeds `threshold` as foreground.
    pub fn load(path: &Path, threshold: f32) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let values: Vec<f32> = img.pixels().map(|p| p[0] as f32 / 255.0).collect();
        Ok(Self::from_threshold(h, w, &values, threshold))
    }

    /// Writes the mask as an 8-bit grayscale PNG with values {0, 255}.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([self.get(y as usize, x as usize) * 255])
        });
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_rejects_non_binary_values() {
        assert!(matches!(
            BinaryMask::new(1, 2, vec![0, 2]),
            Err(Error::NonBinaryMask { index: 1, .. })
        ));
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let m = BinaryMask::new(2, 3, vec![0, 1, 1, 0, 0, 1]).unwrap();
        m.save_png(&path).unwrap();
        assert_eq!(BinaryMask::load(&path, 0.5).unwrap(), m);
    }

    #[test]
    fn image_rejects_out_of_range() {
        assert!(ImageRgb::new(1, 1, vec![0.0, 1.5, 0.2]).is_err());
    }
}
