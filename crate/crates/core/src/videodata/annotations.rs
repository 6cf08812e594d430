//! Mask annotation container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic        8 bytes  "VINOMSK1"
//! frame_count  u32
//! height       u32
//! width        u32
//! per frame:
//!   instance_count u32
//!   per instance:
//!     track_id   u32
//!     confidence f32
//!     run_count  u32
//!     runs       run_count x u32
//! ```
//!
//! Runs cover the grid in row-major order and alternate between 0s and 1s,
//! starting with a (possibly empty) run of 0s. They must sum to
//! `height * width`.

use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use super::InstanceMask;
use crate::error::{Error, Result};
use crate::maskops::BinaryMask;

pub const MAGIC: &[u8; 8] = b"VINOMSK1";

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub height: usize,
    pub width: usize,
    pub frames: Vec<Vec<InstanceMask>>,
}

/// Alternating run lengths, first run counts zeros.
pub fn encode_rle(mask: &BinaryMask) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = 0u8;
    let mut count = 0u32;
    for &v in mask.data() {
        if v != current {
            runs.push(count);
            count = 0;
            current = v;
        }
        count += 1;
    }
    runs.push(count);
    runs
}

pub fn decode_rle(runs: &[u32], height: usize, width: usize) -> Result<BinaryMask> {
    let total: u64 = runs.iter().map(|&r| r as u64).sum();
    if total != (height * width) as u64 {
        return Err(Error::Parse {
            offset: 0,
            message: format!("runs cover {total} pixels, grid has {}", height * width),
        });
    }
    let mut data = Vec::with_capacity(height * width);
    for (i, &r) in runs.iter().enumerate() {
        data.extend(std::iter::repeat_n((i % 2) as u8, r as usize));
    }
    BinaryMask::from_vec(height, width, data)
}

pub fn encode_annotations(set: &AnnotationSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let put = |out: &mut Vec<u8>, v: usize| -> Result<()> {
        let v = u32::try_from(v)
            .map_err(|_| Error::Data(format!("value {v} does not fit the u32 field")))?;
        out.write_u32::<LittleEndian>(v).expect("vec write");
        Ok(())
    };
    put(&mut out, set.frames.len())?;
    put(&mut out, set.height)?;
    put(&mut out, set.width)?;
    for frame in &set.frames {
        put(&mut out, frame.len())?;
        for inst in frame {
            if inst.grid.shape() != (set.height, set.width) {
                return Err(Error::shape(
                    format!("{}x{}", set.height, set.width),
                    format!("{}x{}", inst.grid.height(), inst.grid.width()),
                ));
            }
            out.write_u32::<LittleEndian>(inst.track_id).expect("vec write");
            out.write_f32::<LittleEndian>(inst.confidence).expect("vec write");
            let runs = encode_rle(&inst.grid);
            put(&mut out, runs.len())?;
            for r in runs {
                out.write_u32::<LittleEndian>(r).expect("vec write");
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_bits(self.u32(what)?))
    }
}

pub fn decode_annotations(bytes: &[u8]) -> Result<AnnotationSet> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad magic, expected VINOMSK1".into(),
        });
    }
    let frame_count = cur.u32("frame count")? as usize;
    let height = cur.u32("height")? as usize;
    let width = cur.u32("width")? as usize;
    let pixels = (height as u64) * (width as u64);
    let mut frames = Vec::with_capacity(frame_count.min(1 << 16));
    for f in 0..frame_count {
        let count = cur.u32("instance count")? as usize;
        let mut insts = Vec::with_capacity(count.min(1 << 10));
        for _ in 0..count {
            let track_id = cur.u32("track id")?;
            let conf_at = cur.pos;
            let confidence = cur.f32("confidence")?;
            if !(0.0..=1.0).contains(&confidence) {
                return Err(Error::Parse {
                    offset: conf_at,
                    message: format!("confidence {confidence} outside [0, 1] in frame {f}"),
                });
            }
            let runs_at = cur.pos;
            let run_count = cur.u32("run count")? as usize;
            if run_count as u64 > pixels + 1 {
                return Err(Error::Parse {
                    offset: runs_at,
                    message: format!("{run_count} runs for a {height}x{width} grid"),
                });
            }
            let mut runs = Vec::with_capacity(run_count);
            for _ in 0..run_count {
                runs.push(cur.u32("run length")?);
            }
            let grid = decode_rle(&runs, height, width).map_err(|e| match e {
                Error::Parse { message, .. } => Error::Parse {
                    offset: runs_at,
                    message,
                },
                other => other,
            })?;
            insts.push(InstanceMask::new(grid, track_id, confidence));
        }
        frames.push(insts);
    }
    if cur.pos != bytes.len() {
        return Err(cur.err(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(AnnotationSet {
        height,
        width,
        frames,
    })
}

pub fn save_annotations(path: &Path, set: &AnnotationSet) -> Result<()> {
    let bytes = encode_annotations(set)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_annotations(path: &Path) -> Result<AnnotationSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_annotations(&bytes)
}
