//! Binary mask algebra and crop geometry.
//!
//! Every view of a tube is produced through a [`CropGeometry`]; images are
//! resampled bilinearly and masks with nearest neighbour, so that warping
//! commutes exactly with union and complement.

use rand::Rng;

use crate::error::{Error, Result};

/// Figure-ground grid with values in `{0, 1}`, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c) as u8);
            }
        }
        BinaryMask {
            height,
            width,
            data,
        }
    }

    /// Builds a mask from row-major values; anything other than 0 or 1 is rejected.
    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                format!("{height}x{width}"),
                format!("{} values", data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Data(format!("mask value {v} is not binary")));
        }
        Ok(BinaryMask {
            height,
            width,
            data,
        })
    }

    pub fn from_rows(rows: &[&[u8]]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::shape("rectangular rows", "ragged rows"));
        }
        Self::from_vec(h, w, rows.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a & b).collect();
        Ok(BinaryMask { data, ..*self })
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect();
        Ok(BinaryMask { data, ..*self })
    }

    pub fn not(&self) -> BinaryMask {
        BinaryMask {
            data: self.data.iter().map(|v| 1 - v).collect(),
            ..*self
        }
    }

    /// `self >= other` elementwise.
    pub fn contains(&self, other: &BinaryMask) -> bool {
        self.shape() == other.shape() && self.data.iter().zip(&other.data).all(|(a, b)| a >= b)
    }

    /// Centroid as (row, col), `None` for an empty mask.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    sr += r as f64;
                    sc += c as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sr / n as f64, sc / n as f64))
    }

    /// True when the set pixels form one 4-connected component (vacuously true when empty).
    pub fn is_connected(&self) -> bool {
        let total = self.count_ones();
        let Some(start) = self.data.iter().position(|&v| v != 0) else {
            return true;
        };
        let mut seen = vec![false; self.data.len()];
        let mut stack = vec![start];
        seen[start] = true;
        let mut reached = 0;
        while let Some(i) = stack.pop() {
            reached += 1;
            let (r, c) = (i / self.width, i % self.width);
            let mut push = |j: usize| {
                if self.data[j] != 0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                push(i - self.width);
            }
            if r + 1 < self.height {
                push(i + self.width);
            }
            if c > 0 {
                push(i - 1);
            }
            if c + 1 < self.width {
                push(i + 1);
            }
        }
        reached == total
    }

    fn check_same_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }
}

impl Default for BinaryMask {
    fn default() -> Self {
        BinaryMask::zeros(0, 0)
    }
}

/// Axis-aligned pixel rectangle: `x`/`w` are columns, `y`/`h` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub const fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Rect { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn right(&self) -> usize {
        self.x + self.w
    }

    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub fn fits_within(&self, height: usize, width: usize) -> bool {
        self.right() <= width && self.bottom() <= height
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    /// Smallest rectangle covering both.
    pub fn union(&self, other: &Rect) -> Rect {
        let x = self.x.min(other.x);
        let y = self.y.min(other.y);
        Rect::new(
            x,
            y,
            self.right().max(other.right()) - x,
            self.bottom().max(other.bottom()) - y,
        )
    }
}

/// A crop of a source grid followed by an optional horizontal flip and a
/// resample to `out_height x out_width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CropGeometry {
    pub rect: Rect,
    pub out_height: usize,
    pub out_width: usize,
    pub flip: bool,
}

impl CropGeometry {
    pub fn new(rect: Rect, out_height: usize, out_width: usize, flip: bool) -> Self {
        CropGeometry {
            rect,
            out_height,
            out_width,
            flip,
        }
    }

    /// Whole-grid identity geometry.
    pub fn full(height: usize, width: usize) -> Self {
        Self::new(Rect::new(0, 0, width, height), height, width, false)
    }

    pub fn with_output(mut self, out_height: usize, out_width: usize) -> Self {
        self.out_height = out_height;
        self.out_width = out_width;
        self
    }

    pub fn with_flip(mut self, flip: bool) -> Self {
        self.flip = flip;
        self
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.rect.w == 0 || self.rect.h == 0 {
            return Err(Error::Geometry(format!("zero-area crop {:?}", self.rect)));
        }
        if self.out_height == 0 || self.out_width == 0 {
            return Err(Error::Geometry("output size must be positive".into()));
        }
        if !self.rect.fits_within(height, width) {
            return Err(Error::Geometry(format!(
                "crop {:?} exceeds source bounds {height}x{width}",
                self.rect
            )));
        }
        Ok(())
    }

    /// Source row sampled by output row `i` under nearest-neighbour resampling.
    #[inline]
    pub fn source_row(&self, i: usize) -> usize {
        self.rect.y + ((2 * i + 1) * self.rect.h) / (2 * self.out_height)
    }

    /// Source column sampled by output column `j` (flip applied).
    #[inline]
    pub fn source_col(&self, j: usize) -> usize {
        let j = if self.flip { self.out_width - 1 - j } else { j };
        self.rect.x + ((2 * j + 1) * self.rect.w) / (2 * self.out_width)
    }

    /// Maps a rectangle given in this geometry's output coordinates back to
    /// source coordinates and chains an output size/flip onto it.
    pub fn compose(&self, inner: &Rect, out_height: usize, out_width: usize, flip: bool) -> Self {
        let sx = self.rect.w as f64 / self.out_width as f64;
        let sy = self.rect.h as f64 / self.out_height as f64;
        // Under a flip, output columns [a, b) come from mirrored source columns.
        let lx = if self.flip {
            self.out_width - inner.right()
        } else {
            inner.x
        };
        let x0 = (self.rect.x as f64 + lx as f64 * sx).round() as usize;
        let y0 = (self.rect.y as f64 + inner.y as f64 * sy).round() as usize;
        let x1 = ((self.rect.x as f64 + (lx + inner.w) as f64 * sx).round() as usize)
            .clamp(x0 + 1, self.rect.right().max(x0 + 1));
        let y1 = ((self.rect.y as f64 + (inner.y + inner.h) as f64 * sy).round() as usize)
            .clamp(y0 + 1, self.rect.bottom().max(y0 + 1));
        CropGeometry::new(
            Rect::new(x0, y0, x1 - x0, y1 - y0),
            out_height,
            out_width,
            self.flip ^ flip,
        )
    }
}

/// Elementwise OR of same-shaped masks. An empty list yields an all-zero
/// mask of `shape`.
pub fn union_mask(masks: &[&BinaryMask], shape: (usize, usize)) -> Result<BinaryMask> {
    let mut out = BinaryMask::zeros(shape.0, shape.1);
    for m in masks {
        out.check_same_shape(m)?;
        for (o, v) in out.data.iter_mut().zip(&m.data) {
            *o |= v;
        }
    }
    Ok(out)
}

/// Keeps the selected object and the background, suppressing every other
/// instance: `min(1, (1 - union) + object)`.
pub fn object_conditioned_mask(union: &BinaryMask, object: &BinaryMask) -> Result<BinaryMask> {
    union.check_same_shape(object)?;
    for (i, (u, o)) in union.data.iter().zip(&object.data).enumerate() {
        if *o > *u {
            return Err(Error::Containment {
                row: i / union.width,
                col: i % union.width,
            });
        }
    }
    let data = union
        .data
        .iter()
        .zip(&object.data)
        .map(|(u, o)| ((1 - u) + o).min(1))
        .collect();
    Ok(BinaryMask {
        height: union.height,
        width: union.width,
        data,
    })
}

/// Crop, optional flip, nearest-neighbour resample.
pub fn warp_mask(mask: &BinaryMask, geom: &CropGeometry) -> Result<BinaryMask> {
    geom.validate(mask.height, mask.width)?;
    let cols: Vec<usize> = (0..geom.out_width).map(|j| geom.source_col(j)).collect();
    let mut data = Vec::with_capacity(geom.out_height * geom.out_width);
    for i in 0..geom.out_height {
        let base = geom.source_row(i) * mask.width;
        data.extend(cols.iter().map(|&c| mask.data[base + c]));
    }
    Ok(BinaryMask {
        height: geom.out_height,
        width: geom.out_width,
        data,
    })
}

/// Fraction of the crop's pixels that are foreground in `union`.
pub fn overlap_ratio(crop: &Rect, union: &BinaryMask) -> Result<f64> {
    if crop.area() == 0 {
        return Err(Error::Geometry("zero-area crop".into()));
    }
    if !crop.fits_within(union.height, union.width) {
        return Err(Error::Geometry(format!(
            "crop {crop:?} exceeds mask bounds {}x{}",
            union.height, union.width
        )));
    }
    let mut hits = 0usize;
    for r in crop.y..crop.bottom() {
        let row = &union.data[r * union.width + crop.x..r * union.width + crop.right()];
        hits += row.iter().filter(|&&v| v != 0).count();
    }
    Ok(hits as f64 / crop.area() as f64)
}

/// Tight bounding rectangle of the set pixels.
pub fn bbox_of_mask(mask: &BinaryMask) -> Result<Rect> {
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) {
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r);
                c1 = c1.max(c);
            }
        }
    }
    if r0 == usize::MAX {
        return Err(Error::EmptyMask);
    }
    Ok(Rect::new(c0, r0, c1 - c0 + 1, r1 - r0 + 1))
}

/// Grows `rect` by `fraction` of its width/height on every side (rounded to
/// whole pixels) and clips the result to a `bounds = (height, width)` grid.
pub fn pad_bbox(rect: &Rect, fraction: f64, bounds: (usize, usize)) -> Rect {
    let px = (rect.w as f64 * fraction).round() as i64;
    let py = (rect.h as f64 * fraction).round() as i64;
    let x0 = (rect.x as i64 - px).max(0);
    let y0 = (rect.y as i64 - py).max(0);
    let x1 = (rect.right() as i64 + px).min(bounds.1 as i64);
    let y1 = (rect.bottom() as i64 + py).min(bounds.0 as i64);
    Rect::new(
        x0 as usize,
        y0 as usize,
        (x1 - x0).max(0) as usize,
        (y1 - y0).max(0) as usize,
    )
}

#[derive(Debug, Clone, Copy)]
pub struct LocalCropParams {
    /// Relative area range w.r.t. the padded object box.
    pub area_range: (f64, f64),
    /// Minimum foreground overlap.
    pub alpha: f64,
    pub bbox_padding: f64,
    pub max_retries: usize,
}

impl Default for LocalCropParams {
    fn default() -> Self {
        LocalCropParams {
            area_range: (0.4, 0.7),
            alpha: 0.3,
            bbox_padding: 0.1,
            max_retries: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalCrop {
    pub rect: Rect,
    pub overlap: f64,
    /// Set when no sampled crop reached `alpha` and the best one was kept.
    pub fallback: bool,
}

/// Rejection-samples a sub-rectangle of the padded object box whose
/// relative area lies in `area_range` and whose foreground overlap with
/// `union` reaches `alpha`. After `max_retries` misses the best-overlap
/// candidate is returned with `fallback = true`.
///
/// Sizes are rounded to whole pixels, so for very small boxes the realised
/// relative area can sit slightly outside the range.
pub fn sample_local_crop<R: Rng + ?Sized>(
    union: &BinaryMask,
    object_bbox: &Rect,
    params: &LocalCropParams,
    rng: &mut R,
) -> Result<LocalCrop> {
    if object_bbox.area() == 0 {
        return Err(Error::Geometry("empty object bbox".into()));
    }
    let padded = pad_bbox(object_bbox, params.bbox_padding, union.shape());
    if padded.area() == 0 {
        return Err(Error::Geometry(format!(
            "object bbox {object_bbox:?} lies outside the {}x{} mask",
            union.height, union.width
        )));
    }
    let (lo, hi) = params.area_range;
    let base = padded.area() as f64;
    let mut best: Option<LocalCrop> = None;
    for _ in 0..params.max_retries.max(1) {
        let scale = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let log_ratio = rng.random_range((3.0f64 / 4.0).ln()..(4.0f64 / 3.0).ln());
        let ratio = log_ratio.exp();
        let w = ((scale * base * ratio).sqrt().round() as usize).clamp(1, padded.w);
        let h = ((scale * base / ratio).sqrt().round() as usize).clamp(1, padded.h);
        let x = padded.x + rng.random_range(0..=padded.w - w);
        let y = padded.y + rng.random_range(0..=padded.h - h);
        let rect = Rect::new(x, y, w, h);
        let overlap = overlap_ratio(&rect, union)?;
        let cand = LocalCrop {
            rect,
            overlap,
            fallback: false,
        };
        if overlap >= params.alpha {
            return Ok(cand);
        }
        if best.is_none_or(|b| overlap > b.overlap) {
            best = Some(cand);
        }
    }
    let mut crop = best.expect("at least one candidate sampled");
    crop.fallback = true;
    Ok(crop)
}

/// Standard random-resized crop over a whole grid (used when a frame has no
/// objects): area fraction in `scale`, log-uniform aspect ratio in (3/4, 4/3).
pub fn random_resized_crop<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    scale: (f64, f64),
    rng: &mut R,
) -> Rect {
    let area = (height * width) as f64;
    for _ in 0..10 {
        let s = if scale.1 > scale.0 {
            rng.random_range(scale.0..scale.1)
        } else {
            scale.0
        };
        let ratio = rng
            .random_range((3.0f64 / 4.0).ln()..(4.0f64 / 3.0).ln())
            .exp();
        let w = (s * area * ratio).sqrt().round() as usize;
        let h = (s * area / ratio).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= width && h <= height {
            let x = rng.random_range(0..=width - w);
            let y = rng.random_range(0..=height - h);
            return Rect::new(x, y, w, h);
        }
    }
    // central fallback
    let s = ((scale.0 + scale.1) / 2.0).sqrt();
    let w = ((width as f64 * s).round() as usize).clamp(1, width);
    let h = ((height as f64 * s).round() as usize).clamp(1, height);
    Rect::new((width - w) / 2, (height - h) / 2, w, h)
}
