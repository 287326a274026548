//! Plain image buffers and 8-bit PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};

/// Height × width × RGB, row-major, values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        crate::error::check_dim("image buffer", height * width * 3, data.len())?;
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> [f32; 3] {
        let o = 3 * (i * self.width + j);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, rgb: [f32; 3]) {
        let o = 3 * (i * self.width + j);
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Channel-first (3 × H × W) copy, the layout networks consume.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = self.data[3 * p + c];
            }
        }
        out
    }

    pub fn from_chw(height: usize, width: usize, chw: &[f32]) -> Result<Self> {
        let hw = height * width;
        crate::error::check_dim("CHW buffer", 3 * hw, chw.len())?;
        let mut data = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                data[3 * p + c] = chw[c * hw + p];
            }
        }
        Ok(Self { height, width, data })
    }

    /// Linear values scaled by 255 and rounded; no gamma curve.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        crate::error::check_dim("8-bit image buffer", height * width * 3, bytes.len())?;
        Ok(Self {
            height,
            width,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    /// The image as it reads back after an 8-bit PNG round trip.
    pub fn quantized(&self) -> Self {
        Self::from_u8(self.height, self.width, &self.to_u8()).expect("same dimensions")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(parent) = path.as_ref().parent() {
            std::fs::create_dir_all(parent)?;
        }
        image::save_buffer(
            path,
            &self.to_u8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_u8(h as usize, w as usize, img.as_raw())
    }

    pub fn mean_abs_diff(&self, other: &RgbImage) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::invalid("image sizes differ"));
        }
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        Ok(s / self.data.len() as f64)
    }

    /// Horizontal concatenation; all images must share a height.
    pub fn hstack(images: &[&RgbImage]) -> Result<RgbImage> {
        let h = images.first().map(|i| i.height).unwrap_or(0);
        if images.iter().any(|i| i.height != h) {
            return Err(Error::invalid("hstack needs equal heights"));
        }
        let w: usize = images.iter().map(|i| i.width).sum();
        let mut out = RgbImage::new(h, w);
        let mut x0 = 0;
        for img in images {
            for i in 0..h {
                for j in 0..img.width {
                    out.set(i, x0 + j, img.get(i, j));
                }
            }
            x0 += img.width;
        }
        Ok(out)
    }
}

/// Single-channel map in [0, 1], used for per-token masks.
pub fn gray_to_rgb(height: usize, width: usize, values: &[f32]) -> Result<RgbImage> {
    crate::error::check_dim("gray map", height * width, values.len())?;
    Ok(RgbImage {
        height,
        width,
        data: values.iter().flat_map(|&v| [v, v, v]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_equals_quantization() {
        let mut img = RgbImage::new(4, 5);
        for (k, v) in img.data.iter_mut().enumerate() {
            *v = (k as f32 * 0.0137).fract();
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        img.save_png(&p).unwrap();
        assert_eq!(RgbImage::load_png(&p).unwrap(), img.quantized());
    }

    #[test]
    fn chw_layout_roundtrip() {
        let img = RgbImage::from_data(2, 3, (0..18).map(|v| v as f32).collect()).unwrap();
        let chw = img.to_chw();
        assert_eq!(&chw[..6], &[0.0, 3.0, 6.0, 9.0, 12.0, 15.0]);
        assert_eq!(RgbImage::from_chw(2, 3, &chw).unwrap(), img);
    }
}
