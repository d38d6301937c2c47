//! Screenshot standardization: header crop, whitespace trim, global min-max
//! stretch and thresholded unsharp masking.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::screenshot::Screenshot;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PreprocessError {
    #[error("header crop of {crop} px does not fit image height {height}")]
    CropTooLarge { crop: u32, height: u32 },
    #[error("invalid preprocess config: {0}")]
    InvalidConfig(String),
}

impl PreprocessError {
    pub fn kind(&self) -> &'static str {
        match self {
            PreprocessError::CropTooLarge { .. } => "CropTooLarge",
            PreprocessError::InvalidConfig(_) => "InvalidConfig",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub header_crop_px: u32,
    /// A pixel is background when every channel is at least this value.
    pub bg_threshold: u8,
    /// A row or column is trimmed when this fraction of its pixels is background.
    pub bg_row_fraction: f64,
    pub margin_px: u32,
    pub sharpen_sigma: f64,
    pub sharpen_amount: f64,
    /// Pixels whose high-pass response is at most this are left alone.
    pub sharpen_edge_threshold: f64,
    /// Trimming never produces an image smaller than this in either dimension.
    pub min_size_px: u32,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            header_crop_px: 0,
            bg_threshold: 248,
            bg_row_fraction: 0.995,
            margin_px: 8,
            sharpen_sigma: 1.0,
            sharpen_amount: 1.0,
            sharpen_edge_threshold: 4.0,
            min_size_px: 32,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if !(self.bg_row_fraction > 0.0 && self.bg_row_fraction <= 1.0) {
            return Err(PreprocessError::InvalidConfig(format!(
                "bg_row_fraction must be in (0, 1], got {}",
                self.bg_row_fraction
            )));
        }
        if !(self.sharpen_sigma > 0.0 && self.sharpen_sigma.is_finite()) {
            return Err(PreprocessError::InvalidConfig(format!(
                "sharpen_sigma must be positive, got {}",
                self.sharpen_sigma
            )));
        }
        if !self.sharpen_amount.is_finite() || !self.sharpen_edge_threshold.is_finite() {
            return Err(PreprocessError::InvalidConfig(
                "sharpen parameters must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Global min-max stretch over all pixels and channels to 0..=255.
/// A constant image maps to all zeros.
pub fn normalize_minmax(img: &Screenshot) -> Screenshot {
    let px = img.pixels();
    let lo = px.iter().copied().min().unwrap_or(0) as u32;
    let hi = px.iter().copied().max().unwrap_or(0) as u32;
    let out: Vec<u8> = if hi == lo {
        vec![0; px.len()]
    } else {
        let range = hi - lo;
        let mut lut = [0u8; 256];
        for (v, slot) in lut.iter_mut().enumerate().skip(lo as usize).take(range as usize + 1) {
            // round half up of (v - lo) * 255 / range
            *slot = (((v as u32 - lo) * 510 + range) / (2 * range)) as u8;
        }
        px.iter().map(|&v| lut[v as usize]).collect()
    };
    Screenshot::new(img.width(), img.height(), out, img.email_id()).expect("dimensions unchanged")
}

/// Normalized 1-D Gaussian taps for `sigma`, radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur of one channel with clamped borders.
fn blur_channel(src: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in kernel.iter().enumerate() {
                let xx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                acc += t * row[xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for (k, &t) in kernel.iter().enumerate() {
            let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
            let src_row = &tmp[yy * w..(yy + 1) * w];
            let dst_row = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst_row.iter_mut().zip(src_row) {
                *d += t * s;
            }
        }
    }
    out
}

/// Thresholded unsharp mask: only pixels whose high-pass response exceeds
/// `sharpen_edge_threshold` are boosted by `sharpen_amount`.
pub fn adaptive_sharpen(img: &Screenshot, cfg: &PreprocessConfig) -> Screenshot {
    if cfg.sharpen_amount == 0.0 {
        return img.clone();
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let kernel = gaussian_kernel(cfg.sharpen_sigma);
    let src = img.pixels();
    let mut out = src.to_vec();
    let mut plane = vec![0.0f64; w * h];
    for c in 0..3 {
        for (i, p) in plane.iter_mut().enumerate() {
            *p = src[i * 3 + c] as f64;
        }
        let blurred = blur_channel(&plane, w, h, &kernel);
        for i in 0..w * h {
            let orig = plane[i];
            let delta = orig - blurred[i];
            if delta.abs() > cfg.sharpen_edge_threshold {
                out[i * 3 + c] = (orig + cfg.sharpen_amount * delta).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Screenshot::new(img.width(), img.height(), out, img.email_id()).expect("dimensions unchanged")
}

/// Drops the top `header_crop_px` rows.
pub fn crop_header(img: &Screenshot, cfg: &PreprocessConfig) -> Result<Screenshot, PreprocessError> {
    if cfg.header_crop_px >= img.height() {
        return Err(PreprocessError::CropTooLarge {
            crop: cfg.header_crop_px,
            height: img.height(),
        });
    }
    if cfg.header_crop_px == 0 {
        return Ok(img.clone());
    }
    Ok(img.crop(0, cfg.header_crop_px, img.width(), img.height() - cfg.header_crop_px))
}

/// First and one-past-last index whose line is not background, if any.
fn content_extent(n: usize, is_background: impl Fn(usize) -> bool) -> Option<(usize, usize)> {
    let first = (0..n).find(|&i| !is_background(i))?;
    let last = (0..n).rev().find(|&i| !is_background(i))?;
    Some((first, last + 1))
}

/// Trims background rows, then background columns, from the borders and keeps
/// up to `margin_px` of the trimmed border on each side. Returns the input
/// unchanged when the result would be smaller than `min_size_px`.
pub fn trim_whitespace(img: &Screenshot, cfg: &PreprocessConfig) -> Screenshot {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let px = img.pixels();
    let t = cfg.bg_threshold;
    let is_bg = |x: usize, y: usize| {
        let i = (y * w + x) * 3;
        px[i] >= t && px[i + 1] >= t && px[i + 2] >= t
    };
    let frac = cfg.bg_row_fraction;

    let Some((r0, r1)) = content_extent(h, |y| {
        let bg = (0..w).filter(|&x| is_bg(x, y)).count();
        bg as f64 >= frac * w as f64
    }) else {
        return img.clone();
    };
    let rows = (r1 - r0) as f64;
    let Some((c0, c1)) = content_extent(w, |x| {
        let bg = (r0..r1).filter(|&y| is_bg(x, y)).count();
        bg as f64 >= frac * rows
    }) else {
        return img.clone();
    };

    let m = cfg.margin_px as usize;
    let (y0, y1) = (r0.saturating_sub(m), (r1 + m).min(h));
    let (x0, x1) = (c0.saturating_sub(m), (c1 + m).min(w));
    let (nw, nh) = (x1 - x0, y1 - y0);
    let min = cfg.min_size_px as usize;
    if nw < min || nh < min {
        return img.clone();
    }
    if (nw, nh) == (w, h) {
        return img.clone();
    }
    img.crop(x0 as u32, y0 as u32, nw as u32, nh as u32)
}

/// crop_header, trim_whitespace, normalize_minmax, adaptive_sharpen.
pub fn preprocess(img: &Screenshot, cfg: &PreprocessConfig) -> Result<Screenshot, PreprocessError> {
    cfg.validate()?;
    let cropped = crop_header(img, cfg)?;
    let trimmed = trim_whitespace(&cropped, cfg);
    let normalized = normalize_minmax(&trimmed);
    Ok(adaptive_sharpen(&normalized, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(w: u32, h: u32, values: &[u8]) -> Screenshot {
        let px = values.iter().flat_map(|&v| [v, v, v]).collect();
        Screenshot::new(w, h, px, "t").unwrap()
    }

    #[test]
    fn minmax_spans_full_range() {
        let vals: Vec<u8> = (0..100).map(|i| 10 + (i * 190 / 99) as u8).collect();
        let out = normalize_minmax(&gray(10, 10, &vals));
        assert_eq!(out.pixels().iter().min(), Some(&0));
        assert_eq!(out.pixels().iter().max(), Some(&255));
    }

    #[test]
    fn minmax_constant_is_zero() {
        let out = normalize_minmax(&Screenshot::filled(4, 4, [128, 128, 128], "c"));
        assert!(out.pixels().iter().all(|&v| v == 0));
    }

    #[test]
    fn minmax_two_pixels() {
        let img = Screenshot::new(2, 1, vec![0, 0, 0, 128, 128, 128], "p").unwrap();
        assert_eq!(normalize_minmax(&img).pixels(), &[0, 0, 0, 255, 255, 255]);
    }

    #[test]
    fn minmax_rounds_half_up() {
        // 1 * 255 / 2 = 127.5 -> 128
        let img = gray(3, 1, &[0, 1, 2]);
        assert_eq!(normalize_minmax(&img).pixel(1, 0), [128, 128, 128]);
    }

    #[test]
    fn kernel_properties() {
        let k = gaussian_kernel(1.0);
        assert_eq!(k.len(), 7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(k[0], k[6]);
        assert_eq!(gaussian_kernel(0.5).len(), 5);
    }

    #[test]
    fn sharpen_flat_and_identity_params() {
        let flat = Screenshot::filled(9, 9, [90, 30, 200], "f");
        assert_eq!(adaptive_sharpen(&flat, &PreprocessConfig::default()), flat);
        let mut step = gray(9, 9, &[0; 81]);
        for y in 0..9 {
            for x in 5..9 {
                step.set_pixel(x, y, [255, 255, 255]);
            }
        }
        let zero_amount = PreprocessConfig {
            sharpen_amount: 0.0,
            ..Default::default()
        };
        assert_eq!(adaptive_sharpen(&step, &zero_amount), step);
        let high_threshold = PreprocessConfig {
            sharpen_edge_threshold: 255.0,
            ..Default::default()
        };
        assert_eq!(adaptive_sharpen(&step, &high_threshold), step);
    }

    #[test]
    fn crop_header_cases() {
        let img = Screenshot::filled(1024, 600, [1, 2, 3], "c");
        let none = PreprocessConfig::default();
        assert_eq!(crop_header(&img, &none).unwrap(), img);
        let cfg = PreprocessConfig {
            header_crop_px: 80,
            ..Default::default()
        };
        let out = crop_header(&img, &cfg).unwrap();
        assert_eq!((out.width(), out.height()), (1024, 520));
        let too_big = PreprocessConfig {
            header_crop_px: 600,
            ..Default::default()
        };
        assert_eq!(
            crop_header(&img, &too_big),
            Err(PreprocessError::CropTooLarge { crop: 600, height: 600 })
        );
    }

    #[test]
    fn trim_all_white_unchanged() {
        let img = Screenshot::filled(100, 100, [255, 255, 255], "w");
        assert_eq!(trim_whitespace(&img, &PreprocessConfig::default()), img);
    }

    #[test]
    fn trim_centered_square() {
        let mut img = Screenshot::filled(100, 100, [255, 255, 255], "w");
        for y in 30..70 {
            for x in 30..70 {
                img.set_pixel(x, y, [0, 0, 0]);
            }
        }
        let out = trim_whitespace(&img, &PreprocessConfig::default());
        assert_eq!((out.width(), out.height()), (56, 56));
        assert_eq!(out.pixel(8, 8), [0, 0, 0]);
        assert_eq!(out.pixel(7, 7), [255, 255, 255]);
    }

    #[test]
    fn trim_no_border_unchanged() {
        let img = Screenshot::filled(50, 40, [0, 0, 0], "b");
        assert_eq!(trim_whitespace(&img, &PreprocessConfig::default()), img);
    }

    #[test]
    fn trim_margin_clamped_to_bounds() {
        let mut img = Screenshot::filled(100, 100, [255, 255, 255], "w");
        for y in 3..60 {
            for x in 0..50 {
                img.set_pixel(x, y, [10, 10, 10]);
            }
        }
        let out = trim_whitespace(&img, &PreprocessConfig::default());
        // rows 3..60 plus 3 above (clamped) and 8 below; cols 0..50 plus 8 right
        assert_eq!((out.width(), out.height()), (58, 68));
    }

    #[test]
    fn trim_respects_min_size() {
        let mut img = Screenshot::filled(100, 100, [255, 255, 255], "w");
        img.set_pixel(50, 50, [0, 0, 0]);
        let out = trim_whitespace(&img, &PreprocessConfig::default());
        assert_eq!(out, img);
    }

    #[test]
    fn preprocess_is_stage_composition() {
        let mut img = Screenshot::filled(120, 90, [250, 250, 250], "x");
        for y in 20..60 {
            for x in 10..100 {
                img.set_pixel(x, y, [(x * 2) as u8, 40, (y * 3) as u8]);
            }
        }
        let cfg = PreprocessConfig {
            header_crop_px: 5,
            ..Default::default()
        };
        let manual = adaptive_sharpen(
            &normalize_minmax(&trim_whitespace(&crop_header(&img, &cfg).unwrap(), &cfg)),
            &cfg,
        );
        assert_eq!(preprocess(&img, &cfg).unwrap(), manual);
    }

    #[test]
    fn preprocess_constant_image_goes_to_zero() {
        let img = Screenshot::filled(64, 64, [77, 77, 77], "c");
        let out = preprocess(&img, &PreprocessConfig::default()).unwrap();
        assert!(out.pixels().iter().all(|&v| v == 0));
    }

    #[test]
    fn config_validation() {
        let bad = PreprocessConfig {
            sharpen_sigma: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PreprocessConfig {
            bg_row_fraction: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn arb_image() -> impl Strategy<Value = Screenshot> {
        (1u32..24, 1u32..24).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<u8>(), (w * h * 3) as usize)
                .prop_map(move |px| Screenshot::new(w, h, px, "p").unwrap())
        })
    }

    proptest! {
        #[test]
        fn normalize_idempotent(img in arb_image()) {
            let once = normalize_minmax(&img);
            prop_assert_eq!(normalize_minmax(&once), once);
        }

        #[test]
        fn sharpen_preserves_shape(img in arb_image(), amount in 0.0f64..3.0) {
            let cfg = PreprocessConfig { sharpen_amount: amount, ..Default::default() };
            let out = adaptive_sharpen(&img, &cfg);
            prop_assert_eq!((out.width(), out.height()), (img.width(), img.height()));
            prop_assert_eq!(out.pixels().len(), img.pixels().len());
        }

        #[test]
        fn trim_idempotent_on_boxed_content(
            w in 40u32..120, h in 40u32..120,
            bx in 0u32..30, by in 0u32..30, bw in 1u32..60, bh in 1u32..60,
            shade in 0u8..200,
        ) {
            let mut img = Screenshot::filled(w, h, [255, 255, 255], "b");
            for y in by..(by + bh).min(h) {
                for x in bx..(bx + bw).min(w) {
                    img.set_pixel(x, y, [shade, shade / 2, 255 - shade]);
                }
            }
            let cfg = PreprocessConfig::default();
            let once = trim_whitespace(&img, &cfg);
            prop_assert_eq!(trim_whitespace(&once, &cfg), once);
        }
    }
}
