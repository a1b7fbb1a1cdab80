//! C ABI over the anylevel sampler.
//!
//! Every function returns an [`AlStatus`]; on failure the message is kept
//! per thread and read with [`al_last_error_message`]. Handles are opaque and
//! must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use anylevel::diffusion::{Model, Tensor};
use anylevel::error::Error;
use anylevel::features::build_feature_pyramid;
use anylevel::layout::format::from_json;
use anylevel::layout::{Layout, PrecisionLevel};
use anylevel::sampling::{sample_one, GuidanceConfig, SamplerConfig, SamplerKind};
use anylevel::scene::unit_to_channel;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidLayout = 3,
    Io = 4,
    Format = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

/// A loaded checkpoint.
pub struct AlModel(Model);

/// A parsed layout document.
pub struct AlLayout(Layout);

/// An RGB image with values in [-1, 1].
pub struct AlImage(Tensor);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> AlStatus {
    match e {
        Error::InvalidLayout(_) | Error::UnknownConcept(_) => AlStatus::InvalidLayout,
        Error::InvalidArgument(_) | Error::ShapeMismatch { .. } => AlStatus::InvalidArgument,
        Error::Io { .. } => AlStatus::Io,
        _ => AlStatus::Format,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (AlStatus, String)>) -> AlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AlStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AlStatus::Internal
        }
    }
}

fn fail(e: Error) -> (AlStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (AlStatus, String) {
    (AlStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (AlStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (AlStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn copy_out(bytes: &[u8], buf: *mut u8, len: usize, written: *mut usize) -> Result<(), (AlStatus, String)> {
    if !written.is_null() {
        *written = bytes.len();
    }
    if buf.is_null() || len < bytes.len() {
        return Err((AlStatus::BufferTooSmall, format!("buffer holds {len} bytes, {} needed", bytes.len())));
    }
    std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn al_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message, NUL-terminated, into
/// `buf`. Returns the message length excluding the terminator; the copy is
/// truncated when `len` is too small.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn al_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn al_model_load(path: *const c_char, out: *mut *mut AlModel) -> AlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let model = Model::load(Path::new(path)).map_err(fail)?;
        *out = Box::into_raw(Box::new(AlModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from [`al_model_load`], and is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn al_model_free(model: *mut AlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Canvas side length `2^L` in pixels, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn al_model_side(model: *const AlModel) -> u32 {
    model.as_ref().map_or(0, |m| 1 << m.0.canvas_exponent())
}

/// Number of concepts in the model's vocabulary, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn al_model_concept_count(model: *const AlModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.header.vocabulary.concepts.len())
}

/// Copies concept `index`'s name, NUL-terminated, into `buf`; `written`
/// receives the needed size including the terminator.
///
/// # Safety
/// `model` must be a live handle, `buf` null or `len` writable bytes,
/// `written` null or valid.
#[no_mangle]
pub unsafe extern "C" fn al_model_concept_name(
    model: *const AlModel,
    index: usize,
    buf: *mut c_char,
    len: usize,
    written: *mut usize,
) -> AlStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let name = model
            .0
            .header
            .vocabulary
            .concepts
            .get(index)
            .ok_or_else(|| (AlStatus::InvalidArgument, format!("concept index {index} out of range")))?;
        let mut bytes = name.as_bytes().to_vec();
        bytes.push(0);
        copy_out(&bytes, buf.cast(), len, written)
    })
}

/// Parses a layout document (JSON with run-length masks).
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn al_layout_from_json(json: *const c_char, out: *mut *mut AlLayout) -> AlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let layout = from_json(str_arg(json, "json")?).map_err(fail)?;
        *out = Box::into_raw(Box::new(AlLayout(layout)));
        Ok(())
    })
}

/// # Safety
/// `layout` must be null or come from [`al_layout_from_json`].
#[no_mangle]
pub unsafe extern "C" fn al_layout_free(layout: *mut AlLayout) {
    if !layout.is_null() {
        drop(Box::from_raw(layout));
    }
}

/// Checks the layout against the model; [`AlStatus::InvalidLayout`] with
/// the violations in the error message when it does not fit.
///
/// # Safety
/// Both handles must be live.
#[no_mangle]
pub unsafe extern "C" fn al_layout_validate(model: *const AlModel, layout: *const AlLayout) -> AlStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let layout = layout.as_ref().ok_or_else(|| null("layout"))?;
        model.0.check_layout(&layout.0).into_result().map_err(fail)
    })
}

/// Draws image `index` of the batch seeded by `seed`. A negative `level`
/// keeps each region's own precision; otherwise every region is set to it.
/// `ancestral` selects the stochastic sampler instead of the deterministic one.
///
/// # Safety
/// Both handles must be live and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn al_sample(
    model: *const AlModel,
    layout: *const AlLayout,
    level: i32,
    guidance_scale: f64,
    steps: u32,
    ancestral: bool,
    seed: u64,
    index: u64,
    out: *mut *mut AlImage,
) -> AlStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let layout = &layout.as_ref().ok_or_else(|| null("layout"))?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let layout = if level >= 0 {
            let level = level as u32;
            if level != 0 && !model.header.admissible_levels.contains(PrecisionLevel(level)) {
                return Err((AlStatus::InvalidArgument, format!("level {level} is not admissible")));
            }
            layout.at_precision(level)
        } else {
            layout.clone()
        };
        model.check_layout(&layout).into_result().map_err(fail)?;
        let guidance = GuidanceConfig::with_scale(guidance_scale);
        guidance.validate(model.canvas_exponent()).map_err(fail)?;
        let kind = if ancestral { SamplerKind::Ancestral } else { SamplerKind::Ddim };
        let sampler = SamplerConfig { steps, kind, seed, clip_denoised: true };
        sampler.validate(model.schedule()).map_err(fail)?;
        let pyramid = build_feature_pyramid(&layout, model.provider()).map_err(fail)?;
        let image = sample_one(model, &pyramid, &guidance, &sampler, index, &mut |_, _| {}).map_err(fail)?;
        *out = Box::into_raw(Box::new(AlImage(image)));
        Ok(())
    })
}

/// # Safety
/// `image` must be null or come from [`al_sample`].
#[no_mangle]
pub unsafe extern "C" fn al_image_free(image: *mut AlImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Width in pixels, or 0 for a null handle. Images are square.
///
/// # Safety
/// `image` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn al_image_side(image: *const AlImage) -> u32 {
    image.as_ref().map_or(0, |i| i.0.width() as u32)
}

/// Copies interleaved 8-bit RGB rows into `buf`; `written` receives
/// `3 * side * side`.
///
/// # Safety
/// `image` must be live, `buf` null or `len` writable bytes, `written` null or valid.
#[no_mangle]
pub unsafe extern "C" fn al_image_rgb8(image: *const AlImage, buf: *mut u8, len: usize, written: *mut usize) -> AlStatus {
    guard(|| {
        let t = &image.as_ref().ok_or_else(|| null("image"))?.0;
        let mut bytes = Vec::with_capacity(t.len());
        for y in 0..t.height() {
            for x in 0..t.width() {
                for c in 0..t.channels() {
                    bytes.push(unit_to_channel(t.get(c, y, x)));
                }
            }
        }
        copy_out(&bytes, buf, len, written)
    })
}

/// Writes the image as a lossless PNG.
///
/// # Safety
/// `image` must be live and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn al_image_write_png(image: *const AlImage, path: *const c_char) -> AlStatus {
    guard(|| {
        let t = &image.as_ref().ok_or_else(|| null("image"))?.0;
        let path = str_arg(path, "path")?;
        anylevel::imageio::write_png(Path::new(path), t).map_err(fail)
    })
}
