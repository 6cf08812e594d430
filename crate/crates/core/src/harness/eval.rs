use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::discovery::{concat_heads, corloc, indicator_keys, localize, BBox, CorLocReport, DetectionBox};
use crate::encoder::{attention_map, Encoder, ParamStore};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::maskops::{bbox_of_mask, BinaryMask};
use crate::videodata::{list_images, VideoSource};
use crate::viewgen::ViewConfig;

/// Frozen-encoder evaluation settings.
pub struct Evaluator<'a> {
    pub encoder: &'a Encoder,
    pub params: &'a ParamStore,
    pub views: &'a ViewConfig,
    /// Square resize before the forward pass; 0 keeps the image size.
    pub eval_size: usize,
}

fn scale_box(b: BBox, sx: f64, sy: f64) -> BBox {
    BBox::new(b.x * sx, b.y * sy, b.w * sx, b.h * sy)
}

impl Evaluator<'_> {
    fn prepare(&self, image: &Image) -> Image {
        let img = if self.eval_size > 0 {
            image.resize(self.eval_size, self.eval_size)
        } else {
            image.clone()
        };
        self.views.finish(&img, None)
    }

    /// Box in the coordinates of `image`.
    pub fn detect(&self, image: &Image) -> Result<DetectionBox> {
        let input = self.prepare(image);
        let out = self.encoder.forward(self.params, &input)?;
        let keys = concat_heads(&out.last_keys)?;
        let p = self.encoder.config().patch_size;
        let mut det = localize(&keys, out.grid, p, (input.height(), input.width()))?;
        det.rect = scale_box(
            det.rect,
            image.width() as f64 / input.width() as f64,
            image.height() as f64 / input.height() as f64,
        );
        Ok(det)
    }

    /// Head-averaged class-token attention on the patch grid.
    pub fn attention(&self, image: &Image) -> Result<crate::encoder::Mat> {
        let out = self.encoder.forward(self.params, &self.prepare(image))?;
        Ok(attention_map(&out))
    }

    pub fn evaluate(&self, images: &[(String, Image)], ground_truth: &BTreeMap<String, Vec<BBox>>) -> Result<CorLocReport> {
        let preds = images
            .par_iter()
            .map(|(id, img)| Ok((id.clone(), self.detect(img)?)))
            .collect::<Result<Vec<_>>>()?;
        corloc(&preds, ground_truth)
    }
}

/// Discovery on indicator keys built from the ground-truth boxes.
pub fn oracle_evaluate(
    images: &[(String, Image)],
    ground_truth: &BTreeMap<String, Vec<BBox>>,
    patch_size: usize,
) -> Result<CorLocReport> {
    let preds = images
        .iter()
        .map(|(id, img)| {
            let (h, w) = (img.height(), img.width());
            if h % patch_size != 0 || w % patch_size != 0 {
                return Err(Error::shape(format!("sides divisible by {patch_size}"), format!("{h}x{w}")));
            }
            let boxes = ground_truth.get(id).map(Vec::as_slice).unwrap_or(&[]);
            let fg = BinaryMask::from_fn(h, w, |r, c| {
                let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
                boxes.iter().any(|b| x >= b.x && x < b.x + b.w && y >= b.y && y < b.y + b.h)
            });
            let keys = indicator_keys(&fg, patch_size);
            let grid = (h / patch_size, w / patch_size);
            Ok((id.clone(), localize(&keys, grid, patch_size, (h, w))?))
        })
        .collect::<Result<Vec<_>>>()?;
    corloc(&preds, ground_truth)
}

/// Images of `dir` keyed by file stem, in name order.
pub fn load_image_dir(dir: &Path) -> Result<Vec<(String, Image)>> {
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::Data(format!("no images in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            Ok((id, Image::load(p)?))
        })
        .collect()
}

/// Tight boxes of every mask of every frame, keyed like the frame files
/// (`000000`, `000001`, ...).
pub fn ground_truth_boxes<V: VideoSource + ?Sized>(video: &V) -> Result<BTreeMap<String, Vec<BBox>>> {
    let mut out = BTreeMap::new();
    for i in 0..video.len() {
        let boxes = video
            .masks(i)?
            .iter()
            .filter(|m| !m.grid.is_empty())
            .map(|m| bbox_of_mask(&m.grid).map(BBox::from))
            .collect::<Result<Vec<_>>>()?;
        out.insert(frame_id(i), boxes);
    }
    Ok(out)
}

pub fn frame_id(i: usize) -> String {
    format!("{i:06}")
}

/// Jet-like colour for a value in [0, 1].
fn heat(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    [
        (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0),
        (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0),
        (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0),
    ]
}

/// Blends a min-max normalised attention grid, upsampled to the image
/// size, over the image. A flat map gives a uniform tint.
pub fn attention_overlay(image: &Image, attention: &crate::encoder::Mat) -> Image {
    let (h, w) = (image.height(), image.width());
    let (gr, gc) = attention.dim();
    let lo = attention.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = attention.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let mut out = Image::new(h, w);
    for r in 0..h {
        for c in 0..w {
            let a = attention[[r * gr / h, c * gc / w]];
            let v = if range > 1e-12 { ((a - lo) / range) as f32 } else { 0.5 };
            let hc = heat(v);
            let px = image.pixel(r, c);
            let mix = |i: usize| 0.5 * px[i].clamp(0.0, 1.0) + 0.5 * hc[i];
            out.set_pixel(r, c, [mix(0), mix(1), mix(2)]);
        }
    }
    out
}
