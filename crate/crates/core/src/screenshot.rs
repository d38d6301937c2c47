//! RGB8 raster produced by a renderer and consumed by the image pipeline.

use std::io::Cursor;

use image::{ImageFormat, RgbImage};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImageError {
    #[error("invalid dimensions {width}x{height} for buffer of {len} bytes")]
    BadDimensions { width: u32, height: u32, len: usize },
    #[error("image decode failed: {0}")]
    Decode(String),
    #[error("image encode failed: {0}")]
    Encode(String),
}

/// A decoded, row-major RGB8 screenshot of a rendered email.
#[derive(Clone, PartialEq, Eq)]
pub struct Screenshot {
    pixels: Vec<u8>,
    width: u32,
    height: u32,
    email_id: String,
}

impl std::fmt::Debug for Screenshot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Screenshot")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("email_id", &self.email_id)
            .finish_non_exhaustive()
    }
}

impl Screenshot {
    pub fn new(
        width: u32,
        height: u32,
        pixels: Vec<u8>,
        email_id: impl Into<String>,
    ) -> Result<Self, ImageError> {
        let expected = (width as usize)
            .checked_mul(height as usize)
            .and_then(|n| n.checked_mul(3));
        if width == 0 || height == 0 || expected != Some(pixels.len()) {
            return Err(ImageError::BadDimensions {
                width,
                height,
                len: pixels.len(),
            });
        }
        Ok(Self {
            pixels,
            width,
            height,
            email_id: email_id.into(),
        })
    }

    /// Image filled with a single color.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3], email_id: impl Into<String>) -> Self {
        assert!(width > 0 && height > 0, "screenshot dimensions must be positive");
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self {
            pixels,
            width,
            height,
            email_id: email_id.into(),
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn email_id(&self) -> &str {
        &self.email_id
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Same pixels, different id.
    pub fn with_email_id(mut self, email_id: impl Into<String>) -> Self {
        self.email_id = email_id.into();
        self
    }

    /// Copies the rectangle `[x0, x0+w) x [y0, y0+h)`. The rectangle must lie inside the image.
    pub fn crop(&self, x0: u32, y0: u32, w: u32, h: u32) -> Screenshot {
        assert!(w > 0 && h > 0 && x0 + w <= self.width && y0 + h <= self.height);
        let stride = self.width as usize * 3;
        let mut pixels = Vec::with_capacity(w as usize * h as usize * 3);
        for y in y0..y0 + h {
            let start = y as usize * stride + x0 as usize * 3;
            pixels.extend_from_slice(&self.pixels[start..start + w as usize * 3]);
        }
        Screenshot {
            pixels,
            width: w,
            height: h,
            email_id: self.email_id.clone(),
        }
    }

    /// Decodes a PNG; any alpha channel is composited over white.
    pub fn from_png(bytes: &[u8], email_id: impl Into<String>) -> Result<Self, ImageError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
            .map_err(|e| ImageError::Decode(e.to_string()))?;
        let rgba = img.to_rgba8();
        let (width, height) = rgba.dimensions();
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for px in rgba.pixels() {
            let a = px[3] as u32;
            for c in 0..3 {
                // over-white: c*a + 255*(255-a), rounded
                let v = (px[c] as u32 * a + 255 * (255 - a) + 127) / 255;
                pixels.push(v as u8);
            }
        }
        Self::new(width, height, pixels, email_id)
    }

    pub fn to_png(&self) -> Result<Vec<u8>, ImageError> {
        let img = RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .ok_or_else(|| ImageError::Encode("buffer size mismatch".into()))?;
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)
            .map_err(|e| ImageError::Encode(e.to_string()))?;
        Ok(out.into_inner())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_buffer() {
        assert!(Screenshot::new(2, 2, vec![0; 11], "x").is_err());
        assert!(Screenshot::new(0, 2, vec![], "x").is_err());
        assert!(Screenshot::new(2, 2, vec![0; 12], "x").is_ok());
    }

    #[test]
    fn png_round_trip() {
        let mut img = Screenshot::filled(5, 3, [10, 20, 30], "a");
        img.set_pixel(4, 2, [255, 0, 128]);
        let png = img.to_png().unwrap();
        let back = Screenshot::from_png(&png, "a").unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn alpha_composited_over_white() {
        let mut rgba = image::RgbaImage::new(2, 1);
        rgba.put_pixel(0, 0, image::Rgba([0, 0, 0, 0]));
        rgba.put_pixel(1, 0, image::Rgba([0, 0, 0, 255]));
        let mut buf = Cursor::new(Vec::new());
        rgba.write_to(&mut buf, ImageFormat::Png).unwrap();
        let s = Screenshot::from_png(buf.get_ref(), "a").unwrap();
        assert_eq!(s.pixel(0, 0), [255, 255, 255]);
        assert_eq!(s.pixel(1, 0), [0, 0, 0]);
    }

    #[test]
    fn garbage_is_not_png() {
        assert!(matches!(
            Screenshot::from_png(b"not a png", "a"),
            Err(ImageError::Decode(_))
        ));
    }
}
