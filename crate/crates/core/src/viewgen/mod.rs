//! Per-tube training views under one shared crop geometry.

mod photometric;

pub use photometric::{gaussian_blur, photometric_augment, PhotometricConfig};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::maskops::{
    bbox_of_mask, object_conditioned_mask, random_resized_crop, sample_local_crop, union_mask,
    warp_mask, BinaryMask, CropGeometry, LocalCropParams, Rect,
};
use crate::videodata::{InstanceMask, Tube};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewConfig {
    pub global_size: usize,
    pub local_size: usize,
    /// Local crops per frame.
    pub local_views: usize,
    /// Area range of the global crop relative to the pre-crop.
    pub global_scale: (f64, f64),
    pub precrop_min_fraction: f64,
    pub flip_probability: f64,
    pub local_area_range: (f64, f64),
    pub local_alpha: f64,
    pub local_bbox_padding: f64,
    pub local_max_retries: usize,
    /// Area range of whole-frame local crops when a frame has no objects.
    pub fallback_local_scale: (f64, f64),
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub global_photometric: PhotometricConfig,
    pub local_photometric: PhotometricConfig,
}

impl Default for ViewConfig {
    fn default() -> Self {
        let local = LocalCropParams::default();
        ViewConfig {
            global_size: 64,
            local_size: 32,
            local_views: 4,
            global_scale: (0.6, 1.0),
            precrop_min_fraction: 0.5,
            flip_probability: 0.5,
            local_area_range: local.area_range,
            local_alpha: local.alpha,
            local_bbox_padding: local.bbox_padding,
            local_max_retries: local.max_retries,
            fallback_local_scale: (0.05, 0.4),
            mean: [0.5; 3],
            std: [0.25; 3],
            global_photometric: PhotometricConfig::default(),
            local_photometric: PhotometricConfig {
                solarize_probability: 0.0,
                ..PhotometricConfig::default()
            },
        }
    }
}

impl ViewConfig {
    pub fn local_params(&self) -> LocalCropParams {
        LocalCropParams {
            area_range: self.local_area_range,
            alpha: self.local_alpha,
            bbox_padding: self.local_bbox_padding,
            max_retries: self.local_max_retries,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.global_size == 0 || self.local_size == 0 {
            return bad("view sizes must be positive");
        }
        let range_ok = |r: (f64, f64)| r.0 > 0.0 && r.0 <= r.1 && r.1 <= 1.0;
        if !range_ok(self.global_scale)
            || !range_ok(self.local_area_range)
            || !range_ok(self.fallback_local_scale)
        {
            return bad("crop area ranges must satisfy 0 < lo <= hi <= 1");
        }
        if !(0.0..=1.0).contains(&self.precrop_min_fraction)
            || !(0.0..=1.0).contains(&self.flip_probability)
            || !(0.0..=1.0).contains(&self.local_alpha)
        {
            return bad("pre-crop fraction, flip probability and alpha must lie in [0, 1]");
        }
        if self.local_bbox_padding < 0.0 {
            return bad("bbox padding must be non-negative");
        }
        if self.std.iter().any(|s| *s <= 0.0) {
            return bad("normalisation std must be positive");
        }
        self.global_photometric.validate()?;
        self.local_photometric.validate()
    }

    /// Normalises an augmented view and zeroes pixels outside `mask`.
    /// Zero is the normalised fill value.
    pub fn finish(&self, view: &Image, mask: Option<&BinaryMask>) -> Image {
        let mut out = view.clone();
        let w = out.width();
        for (i, px) in out.data_mut().chunks_exact_mut(3).enumerate() {
            let keep = mask.is_none_or(|m| m.get(i / w, i % w));
            for c in 0..3 {
                px[c] = if keep {
                    (px[c] - self.mean[c]) / self.std[c]
                } else {
                    0.0
                };
            }
        }
        out
    }

    /// Inverse of the normalisation, for visual dumps.
    pub fn denormalise(&self, view: &Image) -> Image {
        let mut out = view.clone();
        for px in out.data_mut().chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = px[c] * self.std[c] + self.mean[c];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherView {
    pub t: usize,
    pub image: Image,
    /// Foreground-union view; `false` means the unmasked whole crop.
    pub foreground: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedView {
    pub t: usize,
    /// Index into the tube's filtered mask list of frame `t`.
    pub k: usize,
    pub track_id: u32,
    pub image: Image,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalView {
    pub t: usize,
    pub r: usize,
    pub image: Image,
    /// Source-frame geometry of the crop.
    pub geometry: CropGeometry,
    pub overlap: f64,
    /// Sampled from the whole frame, or kept below the overlap threshold.
    pub fallback: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch {
    /// One per frame, in frame order.
    pub teacher_views: Vec<TeacherView>,
    pub student_masked_views: Vec<MaskedView>,
    pub local_views: Vec<LocalView>,
    pub track_ids: BTreeMap<(usize, usize), u32>,
    /// Global crop shared by every frame of the tube.
    pub geometry: CropGeometry,
}

impl ViewBatch {
    /// Frames with at least one object visible in the global crop.
    pub fn active_frames(&self) -> Vec<usize> {
        self.teacher_views
            .iter()
            .filter(|v| self.track_ids.keys().any(|(t, _)| *t == v.t))
            .map(|v| v.t)
            .collect()
    }
}

fn clamp_expand(lo: usize, len: usize, new_len: usize, bound: usize, center: f64) -> usize {
    let lo_min = (lo + len).saturating_sub(new_len);
    let lo_max = lo.min(bound - new_len);
    let want = (center - new_len as f64 / 2.0).round().max(0.0) as usize;
    want.clamp(lo_min, lo_max)
}

/// Smallest rectangle covering every mask of the tube, grown about its
/// centre to at least `min_fraction` of the frame and kept inside it.
pub fn make_precrop(
    annotations: &[Vec<InstanceMask>],
    frame_shape: (usize, usize),
    min_fraction: f64,
) -> CropGeometry {
    let (h, w) = frame_shape;
    let full = CropGeometry::full(h, w);
    let mut bbox: Option<Rect> = None;
    for m in annotations.iter().flatten() {
        if let Ok(b) = bbox_of_mask(&m.grid) {
            bbox = Some(bbox.map_or(b, |a| a.union(&b)));
        }
    }
    let Some(b) = bbox else {
        return full;
    };
    let target = (min_fraction * (h * w) as f64).ceil();
    let (mut nw, mut nh) = (b.w, b.h);
    if ((nw * nh) as f64) < target {
        let s = (target / (nw * nh) as f64).sqrt();
        nw = ((nw as f64 * s).ceil() as usize).min(w);
        nh = ((nh as f64 * s).ceil() as usize).min(h);
        if ((nw * nh) as f64) < target {
            if nw == w {
                nh = ((target / w as f64).ceil() as usize).min(h);
            } else {
                nw = ((target / h as f64).ceil() as usize).min(w);
            }
        }
    }
    let cx = b.x as f64 + b.w as f64 / 2.0;
    let cy = b.y as f64 + b.h as f64 / 2.0;
    let x = clamp_expand(b.x, b.w, nw, w, cx);
    let y = clamp_expand(b.y, b.h, nh, h, cy);
    CropGeometry::new(Rect::new(x, y, nw, nh), nh, nw, false)
}

/// Global crop of the pre-crop region, resized to `global_size`.
pub fn sample_global_geometry<R: Rng + ?Sized>(
    precrop: &CropGeometry,
    config: &ViewConfig,
    rng: &mut R,
) -> CropGeometry {
    let p = precrop.rect;
    let inner = random_resized_crop(p.h, p.w, config.global_scale, rng);
    let flip = rng.random_bool(config.flip_probability);
    CropGeometry::new(
        Rect::new(p.x + inner.x, p.y + inner.y, inner.w, inner.h),
        config.global_size,
        config.global_size,
        flip,
    )
}

fn augment_global(frame: &Image, geom: &CropGeometry, config: &ViewConfig, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    photometric_augment(
        &frame.warp(geom),
        &config.global_photometric,
        (geom.out_height, geom.out_width),
        &mut rng,
    )
}

/// Foreground-union teacher view, or `None` when no object is visible.
/// `masks` must already live in `geom`'s output grid.
pub fn build_teacher_view(
    frame: &Image,
    geom: &CropGeometry,
    masks: &[&BinaryMask],
    config: &ViewConfig,
    seed: u64,
) -> Result<Option<Image>> {
    let union = union_mask(masks, (geom.out_height, geom.out_width))?;
    if union.is_empty() {
        return Ok(None);
    }
    let view = augment_global(frame, geom, config, seed);
    Ok(Some(config.finish(&view, Some(&union))))
}

/// Unmasked global view.
pub fn build_full_view(frame: &Image, geom: &CropGeometry, config: &ViewConfig, seed: u64) -> Image {
    config.finish(&augment_global(frame, geom, config, seed), None)
}

/// One object-conditioned view per mask, each with its own photometric
/// draw seeded from `seeds`.
pub fn build_student_masked_views(
    frame: &Image,
    geom: &CropGeometry,
    masks: &[&BinaryMask],
    config: &ViewConfig,
    seeds: &[u64],
) -> Result<Vec<(usize, Image)>> {
    if seeds.len() != masks.len() {
        return Err(Error::shape(format!("{} seeds", masks.len()), seeds.len().to_string()));
    }
    let union = union_mask(masks, (geom.out_height, geom.out_width))?;
    masks
        .iter()
        .zip(seeds)
        .enumerate()
        .map(|(k, (m, seed))| {
            let cond = object_conditioned_mask(&union, m)?;
            let view = augment_global(frame, geom, config, *seed);
            Ok((k, config.finish(&view, Some(&cond))))
        })
        .collect()
}

/// `r` local crops. With objects present they are sampled round-robin from
/// the padded object boxes inside the global crop; otherwise from the whole
/// frame. `masks` live in `geom`'s output grid.
pub fn build_local_views(
    frame: &Image,
    geom: &CropGeometry,
    masks: &[&BinaryMask],
    r: usize,
    config: &ViewConfig,
    seeds: &[u64],
) -> Result<Vec<LocalView>> {
    if seeds.len() != r {
        return Err(Error::shape(format!("{r} seeds"), seeds.len().to_string()));
    }
    let shape = (geom.out_height, geom.out_width);
    let union = union_mask(masks, shape)?;
    let boxes = masks
        .iter()
        .filter(|m| !m.is_empty())
        .map(|m| bbox_of_mask(m))
        .collect::<Result<Vec<_>>>()?;
    let params = config.local_params();
    let size = config.local_size;
    let mut out = Vec::with_capacity(r);
    for (i, seed) in seeds.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(*seed);
        let (geometry, overlap, fallback) = if boxes.is_empty() {
            let rect = random_resized_crop(frame.height(), frame.width(), config.fallback_local_scale, &mut rng);
            let flip = rng.random_bool(config.flip_probability);
            (CropGeometry::new(rect, size, size, flip), 0.0, true)
        } else {
            let crop = sample_local_crop(&union, &boxes[i % boxes.len()], &params, &mut rng)?;
            let flip = rng.random_bool(config.flip_probability);
            (geom.compose(&crop.rect, size, size, flip), crop.overlap, crop.fallback)
        };
        let view = photometric_augment(&frame.warp(&geometry), &config.local_photometric, (size, size), &mut rng);
        out.push(LocalView {
            t: 0,
            r: i,
            image: config.finish(&view, None),
            geometry,
            overlap,
            fallback,
            seed: *seed,
        });
    }
    Ok(out)
}

/// All view families of a tube. Objects whose mask falls outside the global
/// crop are dropped for that frame. With `teacher_masking` off, or for a
/// frame without visible objects, the teacher gets the unmasked crop.
pub fn build_tube_views<R: Rng + ?Sized>(
    tube: &Tube,
    config: &ViewConfig,
    teacher_masking: bool,
    rng: &mut R,
) -> Result<ViewBatch> {
    if tube.is_empty() {
        return Err(Error::Data("empty tube".into()));
    }
    let (h, w) = tube.frame_shape();
    let precrop = make_precrop(&tube.annotations, (h, w), config.precrop_min_fraction);
    let geom = sample_global_geometry(&precrop, config, rng);
    geom.validate(h, w)?;

    let mut batch = ViewBatch {
        teacher_views: Vec::with_capacity(tube.len()),
        student_masked_views: Vec::new(),
        local_views: Vec::new(),
        track_ids: BTreeMap::new(),
        geometry: geom,
    };
    for (t, (frame, anns)) in tube.frames.iter().zip(&tube.annotations).enumerate() {
        let mut kept: Vec<(usize, u32, BinaryMask)> = Vec::new();
        for (k, ann) in anns.iter().enumerate() {
            let warped = warp_mask(&ann.grid, &geom)?;
            if !warped.is_empty() {
                kept.push((k, ann.track_id, warped));
            }
        }
        let refs: Vec<&BinaryMask> = kept.iter().map(|(_, _, m)| m).collect();

        let teacher_seed = rng.next_u64();
        let masked_seeds: Vec<u64> = (0..refs.len()).map(|_| rng.next_u64()).collect();
        let local_seeds: Vec<u64> = (0..config.local_views).map(|_| rng.next_u64()).collect();

        let teacher = if teacher_masking {
            build_teacher_view(&frame.pixels, &geom, &refs, config, teacher_seed)?
        } else {
            None
        };
        let foreground = teacher.is_some();
        let image = match teacher {
            Some(v) => v,
            None => build_full_view(&frame.pixels, &geom, config, teacher_seed),
        };
        batch.teacher_views.push(TeacherView {
            t,
            image,
            foreground,
            seed: teacher_seed,
        });

        let masked = build_student_masked_views(&frame.pixels, &geom, &refs, config, &masked_seeds)?;
        for ((slot, image), seed) in masked.into_iter().zip(masked_seeds) {
            let (k, id, _) = &kept[slot];
            batch.track_ids.insert((t, *k), *id);
            batch.student_masked_views.push(MaskedView {
                t,
                k: *k,
                track_id: *id,
                image,
                seed,
            });
        }

        let locals = build_local_views(&frame.pixels, &geom, &refs, config.local_views, config, &local_seeds)?;
        batch
            .local_views
            .extend(locals.into_iter().map(|v| LocalView { t, ..v }));
    }
    Ok(batch)
}

/// Writes every view as a PNG plus a `manifest.txt` listing family,
/// indices, geometry and seed.
pub fn dump_views(batch: &ViewBatch, config: &ViewConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let g = batch.geometry;
    let geom_str = |g: &CropGeometry| {
        format!(
            "{},{},{},{}->{}x{}{}",
            g.rect.x,
            g.rect.y,
            g.rect.w,
            g.rect.h,
            g.out_height,
            g.out_width,
            if g.flip { " flip" } else { "" }
        )
    };
    let mut manifest = String::new();
    for v in &batch.teacher_views {
        let name = format!("teacher_t{}.png", v.t);
        config.denormalise(&v.image).save(&dir.join(&name))?;
        let kind = if v.foreground { "union" } else { "full" };
        let _ = writeln!(manifest, "{name} teacher {kind} t={} geom={} seed={}", v.t, geom_str(&g), v.seed);
    }
    for v in &batch.student_masked_views {
        let name = format!("masked_t{}_k{}.png", v.t, v.k);
        config.denormalise(&v.image).save(&dir.join(&name))?;
        let _ = writeln!(
            manifest,
            "{name} masked t={} k={} id={} geom={} seed={}",
            v.t,
            v.k,
            v.track_id,
            geom_str(&g),
            v.seed
        );
    }
    for v in &batch.local_views {
        let name = format!("local_t{}_r{}.png", v.t, v.r);
        config.denormalise(&v.image).save(&dir.join(&name))?;
        let _ = writeln!(
            manifest,
            "{name} local t={} r={} geom={} overlap={:.3} fallback={} seed={}",
            v.t,
            v.r,
            geom_str(&v.geometry),
            v.overlap,
            v.fallback,
            v.seed
        );
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}
