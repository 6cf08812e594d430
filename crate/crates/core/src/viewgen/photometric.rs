use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhotometricConfig {
    pub jitter_probability: f64,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub blur_probability: f64,
    pub blur_sigma: (f32, f32),
    pub solarize_probability: f64,
    pub solarize_threshold: f32,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        PhotometricConfig {
            jitter_probability: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            blur_probability: 0.5,
            blur_sigma: (0.1, 1.0),
            solarize_probability: 0.1,
            solarize_threshold: 0.5,
        }
    }
}

impl PhotometricConfig {
    /// No-op augmentation (resize only).
    pub fn identity() -> Self {
        PhotometricConfig {
            jitter_probability: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            blur_probability: 0.0,
            blur_sigma: (0.1, 0.1),
            solarize_probability: 0.0,
            solarize_threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.jitter_probability,
            self.blur_probability,
            self.solarize_probability,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        if self.brightness < 0.0 || self.contrast < 0.0 || self.saturation < 0.0 {
            return Err(Error::Config("jitter strengths must be non-negative".into()));
        }
        if !(self.blur_sigma.0 > 0.0 && self.blur_sigma.0 <= self.blur_sigma.1) {
            return Err(Error::Config("blur sigma range must be positive and ordered".into()));
        }
        Ok(())
    }
}

fn factor<R: Rng + ?Sized>(strength: f32, rng: &mut R) -> f32 {
    if strength > 0.0 {
        rng.random_range((1.0 - strength).max(0.0)..=1.0 + strength)
    } else {
        1.0
    }
}

fn luma(px: &[f32]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

/// Colour jitter, Gaussian blur and solarisation, then a resize to
/// `out_size`. Pixel positions are untouched until the resize. A draw that
/// is switched off consumes no randomness beyond its coin flip.
pub fn photometric_augment<R: Rng + ?Sized>(
    image: &Image,
    config: &PhotometricConfig,
    out_size: (usize, usize),
    rng: &mut R,
) -> Image {
    let mut img = image.clone();
    if rng.random_bool(config.jitter_probability) {
        let b = factor(config.brightness, rng);
        let c = factor(config.contrast, rng);
        let s = factor(config.saturation, rng);
        let data = img.data_mut();
        let n = (data.len() / 3).max(1) as f32;
        let mean = data.chunks_exact(3).map(luma).sum::<f32>() / n * b;
        for px in data.chunks_exact_mut(3) {
            for v in px.iter_mut() {
                *v = (*v * b).clamp(0.0, 1.0);
            }
            for v in px.iter_mut() {
                *v = ((*v - mean) * c + mean).clamp(0.0, 1.0);
            }
            let g = luma(px);
            for v in px.iter_mut() {
                *v = ((*v - g) * s + g).clamp(0.0, 1.0);
            }
        }
    }
    if rng.random_bool(config.blur_probability) {
        let (lo, hi) = config.blur_sigma;
        let sigma = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        img = gaussian_blur(&img, sigma);
    }
    if rng.random_bool(config.solarize_probability) {
        for v in img.data_mut() {
            if *v >= config.solarize_threshold {
                *v = 1.0 - *v;
            }
        }
    }
    img.resize(out_size.0, out_size.1)
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(image: &Image, sigma: f32) -> Image {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|x| (-(x * x) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = (image.height() as i64, image.width() as i64);
    let pass = |src: &Image, horizontal: bool| -> Image {
        let mut out = Image::new(h as usize, w as usize);
        for r in 0..h {
            for c in 0..w {
                let mut acc = [0f32; 3];
                for (i, k) in kernel.iter().enumerate() {
                    let o = i as i64 - radius;
                    let (rr, cc) = if horizontal {
                        (r, (c + o).clamp(0, w - 1))
                    } else {
                        ((r + o).clamp(0, h - 1), c)
                    };
                    let px = src.pixel(rr as usize, cc as usize);
                    for ch in 0..3 {
                        acc[ch] += k * px[ch];
                    }
                }
                out.set_pixel(r as usize, c as usize, acc);
            }
        }
        out
    };
    pass(&pass(image, true), false)
}
