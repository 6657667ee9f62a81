//! Linear RGB images in `[0, 1]` and PSNR.
//!
//! PNG output stores linear values scaled by 255 and rounded; no sRGB
//! transfer curve is applied in either direction.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub width: u32,
    pub height: u32,
    /// Row-major, three interleaved channels.
    pub data: Vec<f32>,
}

impl ImageBuffer {
    /// Values are clamped to `[0, 1]`; non-finite values are rejected.
    pub fn new(width: u32, height: u32, mut data: Vec<f32>) -> Result<Self> {
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "image data",
                expected,
                got: data.len(),
            });
        }
        for v in &mut data {
            if !v.is_finite() {
                return Err(Error::InvalidConfig("image contains non-finite values".into()));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self { width, height, data })
    }

    pub fn from_pixels(width: u32, height: u32, pixels: &[[f32; 3]]) -> Result<Self> {
        Self::new(width, height, pixels.iter().flatten().copied().collect())
    }

    pub fn filled(width: u32, height: u32, rgb: [f32; 3]) -> Self {
        let data = (0..width as usize * height as usize).flat_map(|_| rgb).collect();
        Self::new(width, height, data).expect("fill color must be finite")
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f32; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_rgb8(width: u32, height: u32, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// The image as it will read back from an 8-bit file.
    pub fn quantized(&self) -> Self {
        Self::from_rgb8(self.width, self.height, &self.to_rgb8()).expect("same shape")
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let img = image::RgbImage::from_raw(self.width, self.height, self.to_rgb8())
            .ok_or_else(|| Error::InvalidConfig("image buffer shape".into()))?;
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
        Self::from_rgb8(img.width(), img.height(), img.as_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes).map_err(|e| match e {
            Error::Image(err) => Error::Dataset(format!("{}: {err}", path.display())),
            other => other,
        })
    }
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::DimensionMismatch {
            what: "image size",
            expected: a.data.len(),
            got: b.data.len(),
        });
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data.len().max(1) as f64)
}

/// `10 log10(1 / MSE)` in decibels; identical images give `+inf`.
pub fn compute_psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}
