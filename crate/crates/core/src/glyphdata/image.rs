use std::io::Cursor;
use std::path::Path;

use ::image::{GrayImage, ImageFormat, Luma};

use super::{CharId, StyleId};
use crate::error::{ensure, Error, Result};

/// Single-channel square raster, 0 = ink, 1 = background.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphImage {
    size: usize,
    pixels: Vec<f32>,
    pub char_id: CharId,
    pub style_id: StyleId,
}

impl GlyphImage {
    pub fn new(size: usize, pixels: Vec<f32>, char_id: CharId, style_id: StyleId) -> Result<Self> {
        ensure!(
            size >= 1 && size.is_power_of_two(),
            Validation,
            "image size {size} is not a power of two"
        );
        ensure!(
            pixels.len() == size * size,
            Validation,
            "expected {} pixels, got {}",
            size * size,
            pixels.len()
        );
        ensure!(
            pixels.iter().all(|v| (0.0..=1.0).contains(v)),
            Validation,
            "pixel values must lie in [0, 1]"
        );
        Ok(Self {
            size,
            pixels,
            char_id,
            style_id,
        })
    }

    /// Builds an image from arbitrary finite values, clamping into `[0, 1]`.
    pub fn from_clamped(
        size: usize,
        values: impl IntoIterator<Item = f32>,
        char_id: CharId,
        style_id: StyleId,
    ) -> Result<Self> {
        let pixels: Vec<f32> = values
            .into_iter()
            .map(|v| if v.is_nan() { 1.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(size, pixels, char_id, style_id)
    }

    pub fn filled(size: usize, value: f32, char_id: CharId, style_id: StyleId) -> Result<Self> {
        Self::new(size, vec![value; size * size], char_id, style_id)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.size + col]
    }

    pub fn with_ids(mut self, char_id: CharId, style_id: StyleId) -> Self {
        self.char_id = char_id;
        self.style_id = style_id;
        self
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::from_clamped(
            self.size,
            self.pixels.iter().map(|&v| f(v)),
            self.char_id,
            self.style_id,
        )
    }

    pub fn to_gray8(&self) -> GrayImage {
        let s = self.size as u32;
        GrayImage::from_fn(s, s, |x, y| {
            let v = self.pixels[y as usize * self.size + x as usize];
            Luma([quantize(v)])
        })
    }

    pub fn from_gray8(img: &GrayImage, char_id: CharId, style_id: StyleId) -> Result<Self> {
        ensure!(
            img.width() == img.height(),
            Validation,
            "image is {}x{}, expected square",
            img.width(),
            img.height()
        );
        let pixels = img.pixels().map(|p| f32::from(p.0[0]) / 255.0).collect();
        Self::new(img.width() as usize, pixels, char_id, style_id)
    }

    /// 8-bit grayscale PNG encoding.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_gray8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_png_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: &Path, char_id: CharId, style_id: StyleId) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = ::image::load_from_memory(&bytes)?.to_luma8();
        Self::from_gray8(&img, char_id, style_id)
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize_bilinear(&self, new_size: usize) -> Result<Self> {
        resize_bilinear(&self.pixels, self.size, self.size, new_size)
            .and_then(|px| Self::new(new_size, px, self.char_id, self.style_id))
    }
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn resize_bilinear(
    src: &[f32],
    width: usize,
    height: usize,
    new_size: usize,
) -> Result<Vec<f32>> {
    ensure!(
        new_size.is_power_of_two(),
        Validation,
        "target size {new_size} is not a power of two"
    );
    let sx = width as f64 / new_size as f64;
    let sy = height as f64 / new_size as f64;
    let mut out = Vec::with_capacity(new_size * new_size);
    for r in 0..new_size {
        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(height - 1);
        let wy = fy - y0 as f64;
        for c in 0..new_size {
            let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(width - 1);
            let wx = fx - x0 as f64;
            let at = |y: usize, x: usize| f64::from(src[y * width + x]);
            let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
            let bottom = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
            out.push((top * (1.0 - wy) + bottom * wy).clamp(0.0, 1.0) as f32);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_shapes_and_ranges() {
        assert!(GlyphImage::new(3, vec![1.0; 9], 0, 0).is_err());
        assert!(GlyphImage::new(4, vec![1.0; 15], 0, 0).is_err());
        assert!(GlyphImage::new(4, vec![1.5; 16], 0, 0).is_err());
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = GlyphImage::filled(8, 0.25, 1, 2).unwrap();
        let up = img.resize_bilinear(32).unwrap();
        assert!(up.pixels().iter().all(|&v| (v - 0.25).abs() < 1e-6));
        assert_eq!(up.char_id, 1);
    }

    proptest! {
        #[test]
        fn png_round_trip_preserves_8bit_values(px in proptest::collection::vec(0u8..=255, 64)) {
            let values: Vec<f32> = px.iter().map(|&v| f32::from(v) / 255.0).collect();
            let img = GlyphImage::new(8, values, 3, 4).unwrap();
            let bytes = img.to_png_bytes().unwrap();
            let back = ::image::load_from_memory(&bytes).unwrap().to_luma8();
            let back = GlyphImage::from_gray8(&back, 3, 4).unwrap();
            prop_assert_eq!(back.pixels(), img.pixels());
        }
    }
}
