//! Single-object discovery from the last-layer keys of a frozen encoder,
//! and the IoU / CorLoc metrics used to score it.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use crate::encoder::Mat;
use crate::error::{Error, Result};
use crate::maskops::BinaryMask;

/// Similarity graph over the patches of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGraph {
    /// Cosine similarity of key rows; zero rows for zero-norm keys.
    pub similarity: Mat,
    /// Patch grid `(rows, cols)`, row-major.
    pub grid: (usize, usize),
}

impl PatchGraph {
    pub fn len(&self) -> usize {
        self.similarity.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Edge test. Every patch counts as adjacent to itself.
    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        i == j || self.similarity[[i, j]] > 0.0
    }

    /// Positive neighbours excluding self.
    pub fn degree(&self, i: usize) -> usize {
        (0..self.len()).filter(|&j| j != i && self.similarity[[i, j]] > 0.0).count()
    }
}

/// Concatenates per-head key matrices along columns.
pub fn concat_heads(keys: &[Mat]) -> Result<Mat> {
    let first = keys.first().ok_or_else(|| Error::Eval("no key heads".into()))?;
    let n = first.nrows();
    let views: Vec<_> = keys.iter().map(|k| k.view()).collect();
    if keys.iter().any(|k| k.nrows() != n) {
        return Err(Error::shape(format!("{n} rows per head"), "ragged heads"));
    }
    ndarray::concatenate(ndarray::Axis(1), &views).map_err(|e| Error::Eval(e.to_string()))
}

pub fn build_patch_graph(keys: &Mat, grid: (usize, usize)) -> Result<PatchGraph> {
    let n = keys.nrows();
    if n == 0 {
        return Err(Error::Eval("patch graph needs at least one patch".into()));
    }
    if grid.0 * grid.1 != n {
        return Err(Error::shape(format!("{} patches", grid.0 * grid.1), n.to_string()));
    }
    let mut unit = keys.clone();
    let mut zero_rows = 0;
    for mut row in unit.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        } else {
            zero_rows += 1;
        }
    }
    if zero_rows > 0 {
        log::warn!("{zero_rows} zero-norm key rows left isolated");
    }
    Ok(PatchGraph {
        similarity: unit.dot(&unit.t()),
        grid,
    })
}

/// Patch with the fewest positive neighbours; ties go to the lowest
/// similarity sum, then the lowest index.
pub fn select_seed(graph: &PatchGraph) -> usize {
    let n = graph.len();
    let sim_sum = |i: usize| -> f64 { (0..n).filter(|&j| j != i).map(|j| graph.similarity[[i, j]]).sum() };
    let mut best = 0;
    let (mut best_deg, mut best_sum) = (graph.degree(0), sim_sum(0));
    for i in 1..n {
        let (d, s) = (graph.degree(i), sim_sum(i));
        if d < best_deg || (d == best_deg && s < best_sum) {
            best = i;
            best_deg = d;
            best_sum = s;
        }
    }
    best
}

/// Patches positively similar to the seed that are reachable from it
/// through 4-connected grid steps over such patches. Sorted, contains the seed.
pub fn expand_seed(graph: &PatchGraph, seed: usize) -> Vec<usize> {
    let (rows, cols) = graph.grid;
    let n = graph.len();
    let candidate: Vec<bool> = (0..n).map(|j| graph.adjacent(seed, j)).collect();
    let mut seen = vec![false; n];
    seen[seed] = true;
    let mut queue = VecDeque::from([seed]);
    while let Some(i) = queue.pop_front() {
        let (r, c) = (i / cols, i % cols);
        let mut push = |rr: usize, cc: usize| {
            let j = rr * cols + cc;
            if candidate[j] && !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        };
        if r > 0 {
            push(r - 1, c);
        }
        if r + 1 < rows {
            push(r + 1, c);
        }
        if c > 0 {
            push(r, c - 1);
        }
        if c + 1 < cols {
            push(r, c + 1);
        }
    }
    (0..n).filter(|&i| seen[i]).collect()
}

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

impl From<crate::maskops::Rect> for BBox {
    fn from(r: crate::maskops::Rect) -> Self {
        BBox::new(r.x as f64, r.y as f64, r.w as f64, r.h as f64)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    if !(a.w > 0.0 && a.h > 0.0 && b.w > 0.0 && b.h > 0.0) {
        return Err(Error::Eval(format!("zero-area box in IoU: {a:?} {b:?}")));
    }
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    Ok(inter / (a.area() + b.area() - inter))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionBox {
    pub rect: BBox,
    pub seed: usize,
    pub members: Vec<usize>,
}

/// Tight pixel box of the member cells, clipped to the image.
pub fn box_from_patches(
    members: &[usize],
    seed: usize,
    grid: (usize, usize),
    patch_size: usize,
    image_size: (usize, usize),
) -> Result<DetectionBox> {
    if members.is_empty() {
        return Err(Error::Eval("empty patch set".into()));
    }
    let cols = grid.1;
    let rs = members.iter().map(|i| i / cols);
    let cs = members.iter().map(|i| i % cols);
    let (r0, r1) = (rs.clone().min().unwrap(), rs.max().unwrap());
    let (c0, c1) = (cs.clone().min().unwrap(), cs.max().unwrap());
    let x = (c0 * patch_size) as f64;
    let y = (r0 * patch_size) as f64;
    let right = (((c1 + 1) * patch_size).min(image_size.1)) as f64;
    let bottom = (((r1 + 1) * patch_size).min(image_size.0)) as f64;
    Ok(DetectionBox {
        rect: BBox::new(x, y, right - x, bottom - y),
        seed,
        members: members.to_vec(),
    })
}

/// Graph, seed, expansion and box in one go.
pub fn localize(keys: &Mat, grid: (usize, usize), patch_size: usize, image_size: (usize, usize)) -> Result<DetectionBox> {
    let graph = build_patch_graph(keys, grid)?;
    let seed = select_seed(&graph);
    let members = expand_seed(&graph, seed);
    box_from_patches(&members, seed, grid, patch_size, image_size)
}

/// Two-valued keys marking which patches are mostly foreground: `e1` for
/// patches with at least half their pixels inside `foreground`, `e2` otherwise.
pub fn indicator_keys(foreground: &BinaryMask, patch_size: usize) -> Mat {
    let (rows, cols) = (foreground.height() / patch_size, foreground.width() / patch_size);
    let mut keys = Mat::zeros((rows * cols, 2));
    for r in 0..rows {
        for c in 0..cols {
            let mut on = 0;
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    on += foreground.get(r * patch_size + dy, c * patch_size + dx) as usize;
                }
            }
            let fg = 2 * on >= patch_size * patch_size;
            keys[[r * cols + c, if fg { 0 } else { 1 }]] = 1.0;
        }
    }
    keys
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub image_id: String,
    pub detection: DetectionBox,
    /// Best IoU against the ground truth; `None` when the image has none.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorLocReport {
    pub images: Vec<ImageResult>,
    pub corloc: f64,
    pub evaluated: usize,
    pub excluded: usize,
}

/// Percentage of IoUs at or above 0.5.
pub fn corloc_from_ious(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::Eval("no evaluable images".into()));
    }
    let hits = ious.iter().filter(|v| **v >= 0.5).count();
    Ok(100.0 * hits as f64 / ious.len() as f64)
}

/// Scores predictions against ground truth. Images without ground-truth
/// boxes are excluded from the denominator and counted.
pub fn corloc(predictions: &[(String, DetectionBox)], ground_truth: &BTreeMap<String, Vec<BBox>>) -> Result<CorLocReport> {
    let mut images = Vec::with_capacity(predictions.len());
    let mut ious = Vec::new();
    for (id, det) in predictions {
        let best = match ground_truth.get(id) {
            Some(boxes) if !boxes.is_empty() => {
                let mut best = 0.0f64;
                for b in boxes {
                    best = best.max(iou(&det.rect, b)?);
                }
                ious.push(best);
                Some(best)
            }
            _ => None,
        };
        images.push(ImageResult {
            image_id: id.clone(),
            detection: det.clone(),
            iou: best,
        });
    }
    let excluded = images.len() - ious.len();
    let value = corloc_from_ious(&ious)?;
    Ok(CorLocReport {
        images,
        corloc: value,
        evaluated: ious.len(),
        excluded,
    })
}

/// Parses `image_id x y w h` lines; blank lines and `#` comments are skipped.
pub fn parse_boxes(text: &str) -> Result<BTreeMap<String, Vec<BBox>>> {
    let mut out: BTreeMap<String, Vec<BBox>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Data(format!("box file line {}: expected `id x y w h`", lineno + 1));
        if parts.len() != 5 {
            return Err(bad());
        }
        let nums = parts[1..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        out.entry(parts[0].to_string())
            .or_default()
            .push(BBox::new(nums[0], nums[1], nums[2], nums[3]));
    }
    Ok(out)
}

pub fn format_boxes(boxes: &BTreeMap<String, Vec<BBox>>) -> String {
    let mut s = String::new();
    for (id, list) in boxes {
        for b in list {
            let _ = writeln!(s, "{id} {} {} {} {}", b.x, b.y, b.w, b.h);
        }
    }
    s
}

/// Plain-text report: one line per image, then the aggregate.
pub fn format_report(report: &CorLocReport) -> String {
    let mut s = String::from("# image_id iou seed x y w h\n");
    for r in &report.images {
        let b = r.detection.rect;
        let iou = r.iou.map_or("NA".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(s, "{} {iou} {} {} {} {} {}", r.image_id, r.detection.seed, b.x, b.y, b.w, b.h);
    }
    let _ = writeln!(s, "corloc {:.4}", report.corloc);
    let _ = writeln!(s, "evaluated {}", report.evaluated);
    let _ = writeln!(s, "excluded {}", report.excluded);
    s
}
