//! Dense RGB images with intensities in `[0, 1]`, stored row-major HWC.

use std::path::Path;

use crate::error::{Error, Result};
use crate::maskops::CropGeometry;

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self::filled(height, width, [0.0; 3])
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Image {
            height,
            width,
            data,
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::shape(
                format!("{height}x{width}x3 = {} values", height * width * CHANNELS),
                format!("{} values", data.len()),
            ));
        }
        Ok(Image {
            height,
            width,
            data,
        })
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

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * CHANNELS;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Crop `geom.rect`, optionally mirror, and bilinearly resample to the
    /// geometry's output size. Sample positions use pixel-center alignment,
    /// so an identity geometry reproduces the input exactly.
    pub fn warp(&self, geom: &CropGeometry) -> Image {
        let r = geom.rect;
        let (oh, ow) = (geom.out_height, geom.out_width);
        let sy = r.h as f64 / oh as f64;
        let sx = r.w as f64 / ow as f64;
        let mut out = Image::new(oh, ow);
        for i in 0..oh {
            let fy = (r.y as f64 + (i as f64 + 0.5) * sy - 0.5)
                .clamp(r.y as f64, (r.y + r.h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(r.y + r.h - 1);
            let wy = (fy - y0 as f64) as f32;
            for j in 0..ow {
                let jj = if geom.flip { ow - 1 - j } else { j };
                let fx = (r.x as f64 + (jj as f64 + 0.5) * sx - 0.5)
                    .clamp(r.x as f64, (r.x + r.w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(r.x + r.w - 1);
                let wx = (fx - x0 as f64) as f32;
                let a = self.pixel(y0, x0);
                let b = self.pixel(y0, x1);
                let c = self.pixel(y1, x0);
                let d = self.pixel(y1, x1);
                let mut px = [0.0f32; 3];
                for ch in 0..3 {
                    let top = a[ch] * (1.0 - wx) + b[ch] * wx;
                    let bot = c[ch] * (1.0 - wx) + d[ch] * wx;
                    px[ch] = top * (1.0 - wy) + bot * wy;
                }
                out.set_pixel(i, j, px);
            }
        }
        out
    }

    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        self.warp(&CropGeometry::full(self.height, self.width).with_output(height, width))
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for (dst, src) in out.as_mut().iter_mut().zip(&self.data) {
            *dst = (src.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        out
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Image {
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Image {
            height: img.height() as usize,
            width: img.width() as usize,
            data,
        }
    }

    /// Writes a lossless image; the format follows the file extension (png/ppm).
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }
}
