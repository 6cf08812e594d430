//! Frames, instance masks and tubes.
//!
//! Masks come from one of two providers behind [`VideoSource`]: the
//! synthetic generator (ground truth) or an annotation file on disk.

pub mod annotations;
pub mod synthetic;

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::maskops::BinaryMask;

pub use annotations::{load_annotations, save_annotations, AnnotationSet};
pub use synthetic::{generate_synthetic_video, SceneScript, SpriteShape, SpriteSpec, SyntheticSceneConfig, SyntheticVideo};

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub pixels: Image,
    /// Position within the source video.
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    pub grid: BinaryMask,
    /// Consistent within a tube only.
    pub track_id: u32,
    pub confidence: f32,
}

impl InstanceMask {
    pub fn new(grid: BinaryMask, track_id: u32, confidence: f32) -> Self {
        InstanceMask {
            grid,
            track_id,
            confidence,
        }
    }

    pub fn area(&self) -> usize {
        self.grid.count_ones()
    }
}

/// Random access to a video and its per-frame instance masks.
pub trait VideoSource: Sync {
    fn len(&self) -> usize;
    fn frame_shape(&self) -> (usize, usize);
    fn frame(&self, index: usize) -> Result<Frame>;
    fn masks(&self, index: usize) -> Result<Vec<InstanceMask>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tube {
    pub frames: Vec<Frame>,
    /// `annotations[t]` holds the filtered masks of `frames[t]`.
    pub annotations: Vec<Vec<InstanceMask>>,
    pub stride: usize,
}

impl Tube {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_shape(&self) -> (usize, usize) {
        self.frames
            .first()
            .map_or((0, 0), |f| (f.pixels.height(), f.pixels.width()))
    }

    /// Checks shape agreement, stride spacing and the per-frame mask cap.
    pub fn validate(&self, max_objects: usize) -> Result<()> {
        if self.frames.len() != self.annotations.len() {
            return Err(Error::Data(format!(
                "{} frames but {} annotation lists",
                self.frames.len(),
                self.annotations.len()
            )));
        }
        let shape = self.frame_shape();
        for (t, f) in self.frames.iter().enumerate() {
            if (f.pixels.height(), f.pixels.width()) != shape {
                return Err(Error::Data(format!("frame {t} has a different size")));
            }
            if t > 0 && f.index != self.frames[t - 1].index + self.stride {
                return Err(Error::Data(format!("frame {t} breaks the stride")));
            }
            let anns = &self.annotations[t];
            if anns.len() > max_objects {
                return Err(Error::Data(format!(
                    "frame {t} has {} masks (cap {max_objects})",
                    anns.len()
                )));
            }
            if anns.iter().any(|m| m.grid.shape() != shape) {
                return Err(Error::Data(format!("frame {t} has a mask of the wrong size")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskFilter {
    /// Minimum area as a fraction of frame pixels.
    pub min_area_fraction: f64,
    pub min_confidence: f32,
    pub max_objects: usize,
}

impl Default for MaskFilter {
    fn default() -> Self {
        MaskFilter {
            min_area_fraction: 0.001,
            min_confidence: 0.5,
            max_objects: 10,
        }
    }
}

/// Drops masks under the area/confidence thresholds and keeps at most
/// `max_objects` of the rest, largest first. Ties keep input order.
pub fn filter_masks(
    masks: Vec<InstanceMask>,
    min_area: usize,
    min_confidence: f32,
    max_objects: usize,
) -> Vec<InstanceMask> {
    let mut kept: Vec<(usize, InstanceMask)> = masks
        .into_iter()
        .filter(|m| m.confidence >= min_confidence)
        .map(|m| (m.area(), m))
        .filter(|(a, _)| *a >= min_area)
        .collect();
    kept.sort_by(|a, b| b.0.cmp(&a.0));
    kept.truncate(max_objects);
    kept.into_iter().map(|(_, m)| m).collect()
}

/// Samples `len` frames spaced by `stride` from a uniformly chosen start and
/// attaches the filtered masks of each frame.
pub fn sample_tube<V: VideoSource + ?Sized, R: Rng + ?Sized>(
    video: &V,
    len: usize,
    stride: usize,
    filter: &MaskFilter,
    rng: &mut R,
) -> Result<Tube> {
    let span = len.saturating_sub(1) * stride + 1;
    if len == 0 || video.len() < span {
        return Err(Error::InsufficientFrames {
            needed: span,
            available: video.len(),
        });
    }
    let start = rng.random_range(0..=video.len() - span);
    tube_at(video, start, len, stride, filter)
}

/// Deterministic tube starting at `start`.
pub fn tube_at<V: VideoSource + ?Sized>(
    video: &V,
    start: usize,
    len: usize,
    stride: usize,
    filter: &MaskFilter,
) -> Result<Tube> {
    let span = len.saturating_sub(1) * stride + 1;
    if start + span > video.len() {
        return Err(Error::InsufficientFrames {
            needed: start + span,
            available: video.len(),
        });
    }
    let (h, w) = video.frame_shape();
    let min_area = (filter.min_area_fraction * (h * w) as f64).ceil() as usize;
    let mut frames = Vec::with_capacity(len);
    let mut annotations = Vec::with_capacity(len);
    for t in 0..len {
        let idx = start + t * stride;
        frames.push(video.frame(idx)?);
        annotations.push(filter_masks(
            video.masks(idx)?,
            min_area,
            filter.min_confidence,
            filter.max_objects,
        ));
    }
    Ok(Tube {
        frames,
        annotations,
        stride,
    })
}

/// Image sequence on disk (sorted by file name) plus one annotation file.
pub struct DiskVideo {
    frame_paths: Vec<PathBuf>,
    annotations: AnnotationSet,
}

pub const ANNOTATION_FILE: &str = "annotations.vmsk";

impl DiskVideo {
    /// Opens `dir/frames/*` (png/ppm) and `dir/annotations.vmsk`.
    pub fn open(dir: &Path) -> Result<Self> {
        let frame_dir = dir.join("frames");
        let frame_paths = list_images(&frame_dir)?;
        let annotations = load_annotations(&dir.join(ANNOTATION_FILE))?;
        if annotations.frames.len() != frame_paths.len() {
            return Err(Error::Data(format!(
                "{} frame images but {} annotated frames",
                frame_paths.len(),
                annotations.frames.len()
            )));
        }
        Ok(DiskVideo {
            frame_paths,
            annotations,
        })
    }
}

impl VideoSource for DiskVideo {
    fn len(&self) -> usize {
        self.frame_paths.len()
    }

    fn frame_shape(&self) -> (usize, usize) {
        (self.annotations.height, self.annotations.width)
    }

    fn frame(&self, index: usize) -> Result<Frame> {
        let path = self
            .frame_paths
            .get(index)
            .ok_or_else(|| Error::Data(format!("frame {index} out of range")))?;
        let pixels = Image::load(path)?;
        if (pixels.height(), pixels.width()) != self.frame_shape() {
            return Err(Error::Data(format!(
                "{} is {}x{}, annotations say {}x{}",
                path.display(),
                pixels.height(),
                pixels.width(),
                self.annotations.height,
                self.annotations.width
            )));
        }
        Ok(Frame { pixels, index })
    }

    fn masks(&self, index: usize) -> Result<Vec<InstanceMask>> {
        self.annotations
            .frames
            .get(index)
            .cloned()
            .ok_or_else(|| Error::Data(format!("frame {index} out of range")))
    }
}

/// Sorted list of png/ppm files in `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png" | "ppm")) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Blank {
        len: usize,
    }

    impl VideoSource for Blank {
        fn len(&self) -> usize {
            self.len
        }
        fn frame_shape(&self) -> (usize, usize) {
            (8, 8)
        }
        fn frame(&self, index: usize) -> Result<Frame> {
            Ok(Frame {
                pixels: Image::new(8, 8),
                index,
            })
        }
        fn masks(&self, _index: usize) -> Result<Vec<InstanceMask>> {
            Ok(vec![])
        }
    }

    fn mask_with_area(area: usize, id: u32, conf: f32) -> InstanceMask {
        InstanceMask::new(BinaryMask::from_fn(10, 10, |r, c| r * 10 + c < area), id, conf)
    }

    #[test]
    fn default_tube_spacing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let video = Blank { len: 100 };
        let tube = sample_tube(&video, 4, 10, &MaskFilter::default(), &mut rng).unwrap();
        let s = tube.frames[0].index;
        let idx: Vec<usize> = tube.frames.iter().map(|f| f.index).collect();
        assert_eq!(idx, vec![s, s + 10, s + 20, s + 30]);
        tube.validate(10).unwrap();
    }

    #[test]
    fn single_frame_tube() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tube = sample_tube(&Blank { len: 3 }, 1, 7, &MaskFilter::default(), &mut rng).unwrap();
        assert_eq!(tube.len(), 1);
    }

    #[test]
    fn shortest_video_has_one_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let tube = sample_tube(&Blank { len: 31 }, 4, 10, &MaskFilter::default(), &mut rng).unwrap();
            assert_eq!(tube.frames[0].index, 0);
        }
        let err = sample_tube(&Blank { len: 30 }, 4, 10, &MaskFilter::default(), &mut rng);
        assert!(matches!(
            err,
            Err(Error::InsufficientFrames {
                needed: 31,
                available: 30
            })
        ));
    }

    #[test]
    fn starts_cover_the_valid_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut seen = [false; 5];
        for _ in 0..200 {
            let tube = sample_tube(&Blank { len: 35 }, 4, 10, &MaskFilter::default(), &mut rng).unwrap();
            seen[tube.frames[0].index] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn filter_keeps_largest() {
        let masks: Vec<_> = (0..12).map(|i| mask_with_area(10 + i, i as u32, 0.9)).collect();
        let kept = filter_masks(masks, 1, 0.5, 10);
        assert_eq!(kept.len(), 10);
        let ids: Vec<u32> = kept.iter().map(|m| m.track_id).collect();
        assert_eq!(ids, (2..12).rev().collect::<Vec<u32>>());
    }

    #[test]
    fn filter_empty_and_confidence() {
        assert!(filter_masks(vec![], 1, 0.5, 10).is_empty());
        let kept = filter_masks(
            vec![mask_with_area(5, 1, 0.9), mask_with_area(5, 2, 0.1)],
            1,
            0.5,
            10,
        );
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].track_id, 1);
    }

    #[test]
    fn filter_drops_small() {
        let kept = filter_masks(vec![mask_with_area(3, 1, 1.0), mask_with_area(20, 2, 1.0)], 10, 0.0, 10);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].track_id, 2);
    }
}
