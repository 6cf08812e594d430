//! C interface to `vino-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`VinoStatus`]; on failure `vino_last_error()` describes the
//! problem until the next call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use vino_core::discovery::{corloc_from_ious, iou, BBox};
use vino_core::encoder::{Encoder, ParamStore};
use vino_core::harness::eval::Evaluator;
use vino_core::harness::train::{initial_state, open_corpus, pretrain, trainer_for, write_corpus, RunOutput};
use vino_core::harness::{Checkpoint, ExperimentConfig};
use vino_core::image::Image;
use vino_core::Error;

/// Result codes. Values 2 to 4 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VinoStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8 or an out-of-range argument.
    InvalidArgument = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    /// A Rust panic was caught at the boundary.
    Internal = 5,
}

/// Axis-aligned box in pixels.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VinoBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<VinoBox> for BBox {
    fn from(b: VinoBox) -> Self {
        BBox::new(b.x, b.y, b.w, b.h)
    }
}

/// Experiment configuration.
pub struct VinoConfig {
    inner: ExperimentConfig,
}

/// Frozen encoder ready for single-object discovery.
pub struct VinoDetector {
    encoder: Encoder,
    params: ParamStore,
    config: ExperimentConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: VinoStatus, message: impl Into<String>) -> VinoStatus {
    set_error(message.into());
    status
}

fn from_error(e: Error) -> VinoStatus {
    let status = match e.exit_code() {
        2 => VinoStatus::Config,
        4 => VinoStatus::Numeric,
        _ => VinoStatus::Data,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), VinoStatus>) -> VinoStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VinoStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(VinoStatus::Internal, "internal panic"),
    }
}

unsafe fn text<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, VinoStatus> {
    if ptr.is_null() {
        return Err(fail(VinoStatus::InvalidArgument, format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(VinoStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn path(ptr: *const c_char, what: &str) -> Result<PathBuf, VinoStatus> {
    text(ptr, what).map(PathBuf::from)
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, VinoStatus> {
    ptr.as_ref()
        .ok_or_else(|| fail(VinoStatus::InvalidArgument, format!("{what} is null")))
}

unsafe fn out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, VinoStatus> {
    ptr.as_mut()
        .ok_or_else(|| fail(VinoStatus::InvalidArgument, format!("{what} is null")))
}

/// Message of the last failed call on this thread, or null. Owned by the
/// library; valid until the next call.
#[no_mangle]
pub extern "C" fn vino_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn vino_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default configuration.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vino_config_default(out: *mut *mut VinoConfig) -> VinoStatus {
    guard(|| {
        let slot = self::out(out, "out")?;
        *slot = Box::into_raw(Box::new(VinoConfig {
            inner: ExperimentConfig::default(),
        }));
        Ok(())
    })
}

/// Configuration from dotted key-value text; unset keys keep their defaults.
///
/// # Safety
/// `toml` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vino_config_parse(toml: *const c_char, out: *mut *mut VinoConfig) -> VinoStatus {
    guard(|| {
        let slot = self::out(out, "out")?;
        let inner = ExperimentConfig::from_toml(text(toml, "toml")?).map_err(from_error)?;
        *slot = Box::into_raw(Box::new(VinoConfig { inner }));
        Ok(())
    })
}

/// Dotted form of the configuration. Free with `vino_string_free`.
///
/// # Safety
/// `config` must come from this library; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vino_config_to_string(config: *const VinoConfig, out: *mut *mut c_char) -> VinoStatus {
    guard(|| {
        let c = handle(config, "config")?;
        let slot = self::out(out, "out")?;
        *slot = CString::new(c.inner.to_dotted())
            .map_err(|_| fail(VinoStatus::Internal, "config text holds a nul byte"))?
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `config` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn vino_config_free(config: *mut VinoConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn vino_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Renders the configured synthetic corpus to `out_dir`.
///
/// # Safety
/// `config` must come from this library; `out_dir` must be a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vino_synth_generate(config: *const VinoConfig, out_dir: *const c_char) -> VinoStatus {
    guard(|| {
        let c = handle(config, "config")?;
        write_corpus(&c.inner, &path(out_dir, "out_dir")?).map_err(from_error)
    })
}

/// Trains from scratch on the videos under `data_dir`, writing the log and
/// checkpoints to `out_dir`.
///
/// # Safety
/// `config` must come from this library; the paths must be nul-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn vino_pretrain(
    config: *const VinoConfig,
    data_dir: *const c_char,
    out_dir: *const c_char,
) -> VinoStatus {
    guard(|| {
        let cfg = &handle(config, "config")?.inner;
        let corpus = open_corpus(&path(data_dir, "data_dir")?).map_err(from_error)?;
        let output = RunOutput {
            dir: path(out_dir, "out_dir")?,
        };
        let tr = trainer_for(cfg).map_err(from_error)?;
        pretrain(cfg, &corpus, initial_state(cfg, &tr), Some(&output), |_| {}).map_err(from_error)?;
        Ok(())
    })
}

/// Loads the teacher (or, with `use_student` non-zero, the student) of a checkpoint.
///
/// # Safety
/// `checkpoint` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vino_detector_load(
    checkpoint: *const c_char,
    use_student: i32,
    out: *mut *mut VinoDetector,
) -> VinoStatus {
    guard(|| {
        let slot = self::out(out, "out")?;
        let ck = Checkpoint::load(&path(checkpoint, "checkpoint")?).map_err(from_error)?;
        let config = ck.config().map_err(from_error)?;
        let encoder = Encoder::new(config.encoder.clone()).map_err(from_error)?;
        let params = if use_student != 0 { ck.student } else { ck.teacher };
        encoder.check_params(&params).map_err(from_error)?;
        *slot = Box::into_raw(Box::new(VinoDetector {
            encoder,
            params,
            config,
        }));
        Ok(())
    })
}

/// # Safety
/// `detector` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn vino_detector_free(detector: *mut VinoDetector) {
    if !detector.is_null() {
        drop(Box::from_raw(detector));
    }
}

unsafe fn image_arg(rgb: *const f32, height: usize, width: usize) -> Result<Image, VinoStatus> {
    if rgb.is_null() || height == 0 || width == 0 {
        return Err(fail(VinoStatus::InvalidArgument, "image must be non-null and non-empty"));
    }
    let n = height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| fail(VinoStatus::InvalidArgument, "image size overflows"))?;
    let data = std::slice::from_raw_parts(rgb, n).to_vec();
    Image::from_vec(height, width, data).map_err(from_error)
}

/// Box around the most salient object of an image given as row-major
/// interleaved RGB floats in [0, 1].
///
/// # Safety
/// `rgb` must point to `height * width * 3` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vino_detector_detect(
    detector: *const VinoDetector,
    rgb: *const f32,
    height: usize,
    width: usize,
    out: *mut VinoBox,
) -> VinoStatus {
    guard(|| {
        let d = handle(detector, "detector")?;
        let slot = self::out(out, "out")?;
        let img = image_arg(rgb, height, width)?;
        let ev = Evaluator {
            encoder: &d.encoder,
            params: &d.params,
            views: &d.config.views,
            eval_size: d.config.discovery.eval_size,
        };
        let r = ev.detect(&img).map_err(from_error)?.rect;
        *slot = VinoBox {
            x: r.x,
            y: r.y,
            w: r.w,
            h: r.h,
        };
        Ok(())
    })
}

/// Head-averaged class-token attention, row-major on the patch grid.
/// `out` must hold `capacity` floats; the grid size is written to `rows` and `cols`.
///
/// # Safety
/// Pointers must be valid for the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn vino_detector_attention(
    detector: *const VinoDetector,
    rgb: *const f32,
    height: usize,
    width: usize,
    out: *mut f64,
    capacity: usize,
    rows: *mut usize,
    cols: *mut usize,
) -> VinoStatus {
    guard(|| {
        let d = handle(detector, "detector")?;
        let (rows, cols) = (self::out(rows, "rows")?, self::out(cols, "cols")?);
        let img = image_arg(rgb, height, width)?;
        let ev = Evaluator {
            encoder: &d.encoder,
            params: &d.params,
            views: &d.config.views,
            eval_size: 0,
        };
        let att = ev.attention(&img).map_err(from_error)?;
        (*rows, *cols) = att.dim();
        if out.is_null() || capacity < att.len() {
            return Err(fail(
                VinoStatus::InvalidArgument,
                format!("attention needs {} values, capacity is {capacity}", att.len()),
            ));
        }
        let dst = std::slice::from_raw_parts_mut(out, att.len());
        for (o, v) in dst.iter_mut().zip(att.iter()) {
            *o = *v;
        }
        Ok(())
    })
}

/// Intersection over union of two boxes.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vino_iou(a: VinoBox, b: VinoBox, out: *mut f64) -> VinoStatus {
    guard(|| {
        let slot = self::out(out, "out")?;
        *slot = iou(&a.into(), &b.into()).map_err(from_error)?;
        Ok(())
    })
}

/// Percentage of IoUs at or above 0.5.
///
/// # Safety
/// `ious` must point to `n` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vino_corloc(ious: *const f64, n: usize, out: *mut f64) -> VinoStatus {
    guard(|| {
        let slot = self::out(out, "out")?;
        if ious.is_null() && n > 0 {
            return Err(fail(VinoStatus::InvalidArgument, "ious is null"));
        }
        let v = if n == 0 { &[][..] } else { std::slice::from_raw_parts(ious, n) };
        *slot = corloc_from_ious(v).map_err(from_error)?;
        Ok(())
    })
}
