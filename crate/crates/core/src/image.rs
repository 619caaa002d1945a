//! RGB images with gray values in `[0, 1]`, plus PNG input/output.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

/// `H×W×3` image stored interleaved (HWC), every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim("image size", format!("{height}x{width}")));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::dim(
                "image data",
                format!(
                    "{height}x{width}x3 needs {} values, got {}",
                    height * width * CHANNELS,
                    data.len()
                ),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    /// Builds an image from arbitrary values, clipping each into `[0, 1]`.
    pub fn from_clipped(height: usize, width: usize, mut data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * CHANNELS);
        clip_all(&mut data);
        Image {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Image::from_clipped(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub(crate) fn map_values(&self, f: impl FnMut(&f64) -> f64) -> Image {
        let data = self.data.iter().map(f).collect();
        Image::from_clipped(self.height, self.width, data)
    }

    /// Channel-major copy (`C×H×W`).
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * CHANNELS];
        for (p, px) in self.data.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                out[c * plane + p] = px[c];
            }
        }
        out
    }

    pub fn from_chw(height: usize, width: usize, chw: &[f64]) -> Result<Self> {
        let plane = height * width;
        if chw.len() != plane * CHANNELS {
            return Err(Error::dim("image data", "CHW buffer size mismatch"));
        }
        let mut data = vec![0.0; plane * CHANNELS];
        for p in 0..plane {
            for c in 0..CHANNELS {
                data[p * CHANNELS + c] = chw[c * plane + p];
            }
        }
        Image::new(height, width, data)
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img
            .into_raw()
            .into_iter()
            .map(|b| f64::from(b) / 255.0)
            .collect();
        Image::new(h as usize, w as usize, data)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer size matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

pub(crate) fn clip_all(data: &mut [f64]) {
    for v in data {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Stacks images into an `N×3×H×W` tensor. All images must share a size.
pub fn batch_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::contract("empty image batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w * CHANNELS);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::dim(
                "image size",
                format!("{}x{} in a batch of {h}x{w}", img.height, img.width),
            ));
        }
        data.extend(img.to_chw());
    }
    Tensor::new(vec![images.len(), CHANNELS, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(Image::new(1, 1, vec![0.0, 0.5, 1.0]).is_ok());
        assert!(Image::new(1, 1, vec![0.0, 0.5, 1.01]).is_err());
        assert!(Image::new(1, 1, vec![0.0, f64::NAN, 1.0]).is_err());
        assert!(Image::new(1, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn chw_round_trip() {
        let data: Vec<f64> = (0..2 * 3 * 3).map(|i| i as f64 / 20.0).collect();
        let img = Image::new(2, 3, data).unwrap();
        let chw = img.to_chw();
        assert_eq!(chw[0], img.pixel(0, 0)[0]);
        assert_eq!(chw[6], img.pixel(0, 0)[1]);
        assert_eq!(Image::from_chw(2, 3, &chw).unwrap(), img);
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let data: Vec<f64> = (0..4 * 5 * 3)
            .map(|i| (i * 4 % 256) as f64 / 255.0)
            .collect();
        let img = Image::new(4, 5, data).unwrap();
        img.write_png(&path).unwrap();
        let back = Image::read_png(&path).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
        assert!(back.max_diff(&img) < 1e-15);
    }

    impl Image {
        fn max_diff(&self, o: &Image) -> f64 {
            self.data
                .iter()
                .zip(&o.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        }
    }
}
