//! Resize, crop and normalize images into network input.

use image::{imageops, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Random crop.
    Train,
    /// Center crop.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub short_side: u32,
    pub crop: u32,
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self::imagenet(256, 224)
    }
}

impl PreprocessSpec {
    pub fn imagenet(short_side: u32, crop: u32) -> Self {
        Self {
            short_side,
            crop,
            channel_mean: IMAGENET_MEAN,
            channel_std: IMAGENET_STD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.short_side {
            return Err(Error::Config(format!(
                "crop {} must be in 1..={}",
                self.crop, self.short_side
            )));
        }
        if self.channel_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config(format!("channel_std {:?} must be positive", self.channel_std)));
        }
        Ok(())
    }

    /// Full chain: aspect resize, crop by mode, normalize.
    pub fn apply<R: Rng + ?Sized>(&self, image: &RgbImage, mode: Mode, rng: &mut R) -> Result<ChwImage> {
        let resized = aspect_resize(image, self.short_side);
        let cropped = match mode {
            Mode::Train => random_crop(&resized, self.crop, rng)?,
            Mode::Eval => center_crop(&resized, self.crop)?,
        };
        Ok(normalize(&cropped, &self.channel_mean, &self.channel_std))
    }
}

/// Channels-first f32 image.
#[derive(Debug, Clone, PartialEq)]
pub struct ChwImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Target (height, width) with the short side at `short_side` and the long
/// side rounded half-up.
pub fn aspect_size(height: u32, width: u32, short_side: u32) -> (u32, u32) {
    let scale = |long: u32, short: u32| -> u32 {
        let (long, short, target) = (long as u64, short as u64, short_side as u64);
        ((2 * long * target + short) / (2 * short)) as u32
    };
    if height <= width {
        (short_side, scale(width, height))
    } else {
        (scale(height, width), short_side)
    }
}

pub fn aspect_resize(image: &RgbImage, short_side: u32) -> RgbImage {
    let (h, w) = aspect_size(image.height(), image.width(), short_side);
    if (h, w) == (image.height(), image.width()) {
        return image.clone();
    }
    imageops::resize(image, w, h, imageops::FilterType::Triangle)
}

fn check_fits(image: &RgbImage, window: u32) -> Result<()> {
    if image.height() < window || image.width() < window {
        return Err(Error::ImageTooSmall {
            height: image.height(),
            width: image.width(),
            window,
        });
    }
    Ok(())
}

/// Uniform top-left (row, col) of a `window` crop.
pub fn random_offset<R: Rng + ?Sized>(height: u32, width: u32, window: u32, rng: &mut R) -> (u32, u32) {
    (rng.gen_range(0..=height - window), rng.gen_range(0..=width - window))
}

pub fn center_offset(height: u32, width: u32, window: u32) -> (u32, u32) {
    ((height - window) / 2, (width - window) / 2)
}

pub fn crop_at(image: &RgbImage, row: u32, col: u32, window: u32) -> RgbImage {
    imageops::crop_imm(image, col, row, window, window).to_image()
}

pub fn random_crop<R: Rng + ?Sized>(image: &RgbImage, window: u32, rng: &mut R) -> Result<RgbImage> {
    check_fits(image, window)?;
    let (r, c) = random_offset(image.height(), image.width(), window, rng);
    Ok(crop_at(image, r, c, window))
}

pub fn center_crop(image: &RgbImage, window: u32) -> Result<RgbImage> {
    check_fits(image, window)?;
    let (r, c) = center_offset(image.height(), image.width(), window);
    Ok(crop_at(image, r, c, window))
}

/// `(pixel / 255 - mean_c) / std_c`, channels first.
pub fn normalize(image: &RgbImage, mean: &[f64; 3], std: &[f64; 3]) -> ChwImage {
    let (h, w) = (image.height() as usize, image.width() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in image.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = ((px[c] as f64 / 255.0 - mean[c]) / std[c]) as f32;
        }
    }
    ChwImage { height: h, width: w, data }
}

/// Inverse of [`normalize`], clamped to valid pixels.
pub fn denormalize(image: &ChwImage, mean: &[f64; 3], std: &[f64; 3]) -> RgbImage {
    let (h, w) = (image.height, image.width);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let px = |c: usize| {
            let v = (image.data[c * h * w + i] as f64 * std[c] + mean[c]) * 255.0;
            v.round().clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn aspect_sizes() {
        assert_eq!(aspect_size(300, 512, 256), (256, 437));
        assert_eq!(aspect_size(512, 300, 256), (437, 256));
        assert_eq!(aspect_size(256, 256, 256), (256, 256));
        // exactly .5 rounds up: 3 * 3 / 2 = 4.5
        assert_eq!(aspect_size(2, 3, 3), (3, 5));
    }

    #[test]
    fn resize_hits_target() {
        let img = RgbImage::new(512, 300);
        let out = aspect_resize(&img, 256);
        assert_eq!((out.height(), out.width()), (256, 437));
    }

    #[test]
    fn center_offsets() {
        assert_eq!(center_offset(256, 437, 256), (0, 90));
        assert_eq!(center_offset(258, 258, 256), (1, 1));
        let small = RgbImage::new(300, 255);
        assert!(matches!(
            center_crop(&small, 256),
            Err(Error::ImageTooSmall { height: 255, width: 300, window: 256 })
        ));
    }

    #[test]
    fn random_offsets_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let (r, c) = random_offset(256, 437, 256, &mut rng);
            assert_eq!(r, 0);
            assert!(c <= 181);
        }
        assert_eq!(random_offset(256, 256, 256, &mut rng), (0, 0));
    }

    #[test]
    fn seeded_crop_repeats() {
        let img = RgbImage::from_fn(40, 30, |x, y| image::Rgb([x as u8, y as u8, (x * y) as u8]));
        let a = random_crop(&img, 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = random_crop(&img, 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn normalization_constants() {
        let half = [0.5; 3];
        let black = normalize(&RgbImage::new(2, 2), &half, &half);
        assert!(black.data.iter().all(|&v| v == -1.0));
        let white = normalize(&RgbImage::from_pixel(1, 1, image::Rgb([255; 3])), &half, &half);
        assert!(white.data.iter().all(|&v| v == 1.0));
        let img = RgbImage::from_pixel(1, 1, image::Rgb([51, 102, 255]));
        let unit = normalize(&img, &[0.0; 3], &[1.0; 3]);
        assert_eq!(unit.data, vec![0.2, 0.4, 1.0]);
    }

    #[test]
    fn channels_first_layout() {
        let img = RgbImage::from_fn(2, 1, |x, _| image::Rgb([x as u8 * 255, 0, 255]));
        let out = normalize(&img, &[0.0; 3], &[1.0; 3]);
        assert_eq!(out.data, vec![0.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(denormalize(&out, &[0.0; 3], &[1.0; 3]), img);
    }

    #[test]
    fn spec_validation() {
        assert!(PreprocessSpec::imagenet(256, 224).validate().is_ok());
        assert!(PreprocessSpec::imagenet(224, 256).validate().is_err());
        let mut s = PreprocessSpec::default();
        s.channel_std[1] = 0.0;
        assert!(s.validate().is_err());
    }
}
