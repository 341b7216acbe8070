//! C ABI over `partfuse`.
//!
//! Every handle is opaque and owned by the caller once returned; release it
//! with the matching `*_free`. Every fallible call returns a [`PfStatus`]
//! and, on failure, leaves a message for [`pf_last_error`] on the calling
//! thread. Output pointers are written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use partfuse::fusion::{PartSource, SwapSpec};
use partfuse::image::{read_image, read_mask, write_image, Image};
use partfuse::mask::{Mask, Part, PartMaskSet};
use partfuse::model::{ddim_config, Model};
use partfuse::{metrics, pipeline, Error, ExitCode};

/// Call outcome. The data, usage and numeric codes match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PfStatus {
    Ok = 0,
    Usage = 2,
    Data = 3,
    Numeric = 4,
    NullPointer = 5,
    Panic = 6,
}

/// A trained model loaded from a checkpoint.
pub struct PfModel(Model);

/// An RGB image with channel values in [0, 1].
pub struct PfImage(Image);

/// A binary mask.
pub struct PfMask(Mask);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PfStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            PfStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(&e.to_string());
            match e.exit_code() {
                ExitCode::Success => PfStatus::Ok,
                ExitCode::Usage => PfStatus::Usage,
                ExitCode::Data => PfStatus::Data,
                ExitCode::Numeric => PfStatus::Numeric,
            }
        }
        Err(_) => {
            set_error("internal panic");
            PfStatus::Panic
        }
    }
}

unsafe fn get<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Error::Config(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, v: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("output handle"));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn pf_model_load(path: *const c_char, out: *mut *mut PfModel) -> PfStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        put(out, PfModel(Model::load(&p)?))
    })
}

/// # Safety
/// `model` must be null or a handle from [`pf_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pf_model_free(model: *mut PfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Image side the model was trained on.
///
/// # Safety
/// `model` must be a live handle and `side` writable.
#[no_mangle]
pub unsafe extern "C" fn pf_model_image_size(model: *const PfModel, side: *mut usize) -> PfStatus {
    guard(|| {
        let m = get(model, "model")?;
        if side.is_null() {
            return Err(Failure::Null("side"));
        }
        *side = m.0.cfg.image_size;
        Ok(())
    })
}

/// Image from `height * width * 3` interleaved RGB bytes.
///
/// # Safety
/// `rgb` must point to that many readable bytes and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_image_from_rgb8(height: usize, width: usize, rgb: *const u8, out: *mut *mut PfImage) -> PfStatus {
    guard(|| {
        if rgb.is_null() {
            return Err(Failure::Null("rgb"));
        }
        let bytes = std::slice::from_raw_parts(rgb, height * width * 3);
        put(out, PfImage(Image::from_rgb8(height, width, bytes)?))
    })
}

/// Reads a PPM or PNG file.
///
/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pf_image_read(path: *const c_char, out: *mut *mut PfImage) -> PfStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        put(out, PfImage(read_image(&p)?))
    })
}

/// Writes PNG for a `.png` path, binary PPM otherwise.
///
/// # Safety
/// `image` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pf_image_write(image: *const PfImage, path: *const c_char) -> PfStatus {
    guard(|| {
        let img = get(image, "image")?;
        let p = path_arg(path, "path")?;
        Ok(write_image(&p, &img.0)?)
    })
}

/// # Safety
/// `image` must be a live handle; `height` and `width` writable.
#[no_mangle]
pub unsafe extern "C" fn pf_image_dims(image: *const PfImage, height: *mut usize, width: *mut usize) -> PfStatus {
    guard(|| {
        let img = get(image, "image")?;
        if height.is_null() || width.is_null() {
            return Err(Failure::Null("dims output"));
        }
        (*height, *width) = img.0.dims();
        Ok(())
    })
}

/// Copies interleaved RGB bytes into `buf`, which must hold `len >= h*w*3`.
///
/// # Safety
/// `image` must be a live handle and `buf` writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn pf_image_rgb8(image: *const PfImage, buf: *mut u8, len: usize) -> PfStatus {
    guard(|| {
        let img = get(image, "image")?;
        if buf.is_null() {
            return Err(Failure::Null("buf"));
        }
        let bytes = img.0.to_rgb8();
        if len < bytes.len() {
            return Err(Error::Contract(format!("buffer of {len} bytes for {} image bytes", bytes.len())).into());
        }
        std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
        Ok(())
    })
}

/// # Safety
/// `image` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_image_free(image: *mut PfImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Mask from `height * width` cells, each 0 or 1.
///
/// # Safety
/// `cells` must point to that many readable bytes and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_mask_from_cells(height: usize, width: usize, cells: *const u8, out: *mut *mut PfMask) -> PfStatus {
    guard(|| {
        if cells.is_null() {
            return Err(Failure::Null("cells"));
        }
        let v = std::slice::from_raw_parts(cells, height * width).to_vec();
        put(out, PfMask(Mask::new(height, width, v)?))
    })
}

/// Reads a PGM mask (nonzero is set).
///
/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pf_mask_read(path: *const c_char, out: *mut *mut PfMask) -> PfStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        put(out, PfMask(read_mask(&p)?))
    })
}

/// # Safety
/// `mask` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_mask_free(mask: *mut PfMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Swaps parts onto `target`.
///
/// `target_masks` holds the target's eyes, nose and mouth masks.
/// `sources` and `source_masks` hold one entry per part in the same order;
/// a null source keeps the target's part, otherwise the matching source mask
/// selects the region to transplant. `steps == 0` keeps the checkpoint's
/// DDIM step count.
///
/// # Safety
/// Each array must hold three entries; every non-null handle must be live.
#[no_mangle]
pub unsafe extern "C" fn pf_swap(
    model: *const PfModel,
    target: *const PfImage,
    target_masks: *const *const PfMask,
    sources: *const *const PfImage,
    source_masks: *const *const PfMask,
    seed: u64,
    steps: usize,
    out: *mut *mut PfImage,
) -> PfStatus {
    guard(|| {
        let m = &get(model, "model")?.0;
        let target = &get(target, "target")?.0;
        if target_masks.is_null() || sources.is_null() || source_masks.is_null() {
            return Err(Failure::Null("mask or source array"));
        }
        let tm: Vec<Mask> = (0..3).map(|k| get(*target_masks.add(k), "target mask").map(|h| h.0.clone())).collect::<Result<_, _>>()?;
        let masks = PartMaskSet::new(tm[0].clone(), tm[1].clone(), tm[2].clone())?;
        let mut spec = SwapSpec::none();
        for (k, part) in Part::SWAPPABLE.into_iter().enumerate() {
            let src = *sources.add(k);
            if !src.is_null() {
                let mask = get(*source_masks.add(k), "source mask")?;
                spec.set(part, PartSource { image: (*src).0.clone(), mask: mask.0.clone() })?;
            }
        }
        let mut ddim = ddim_config(&m.run)?;
        ddim.seed = seed;
        if steps > 0 {
            ddim.steps = steps;
        }
        let result = pipeline::swap(m, target, &masks, &spec, &ddim)?;
        put(out, PfImage(result.image))
    })
}

/// Cosine similarity of the part embeddings of two masked regions.
///
/// # Safety
/// All handles must be live and `value` writable.
#[no_mangle]
pub unsafe extern "C" fn pf_fpsim(
    generated: *const PfImage,
    generated_mask: *const PfMask,
    reference: *const PfImage,
    reference_mask: *const PfMask,
    value: *mut f64,
) -> PfStatus {
    guard(|| {
        let v = metrics::fpsim(
            &get(generated, "generated")?.0,
            &get(generated_mask, "generated mask")?.0,
            &get(reference, "reference")?.0,
            &get(reference_mask, "reference mask")?.0,
        )?;
        if value.is_null() {
            return Err(Failure::Null("value"));
        }
        *value = v;
        Ok(())
    })
}

/// Mean squared channel difference, over `region` when it is non-null.
///
/// # Safety
/// `a` and `b` must be live, `region` null or live, `value` writable.
#[no_mangle]
pub unsafe extern "C" fn pf_mse(a: *const PfImage, b: *const PfImage, region: *const PfMask, value: *mut f64) -> PfStatus {
    guard(|| {
        let region = region.as_ref().map(|m| &m.0);
        let v = metrics::mse(&get(a, "a")?.0, &get(b, "b")?.0, region)?;
        if value.is_null() {
            return Err(Failure::Null("value"));
        }
        *value = v;
        Ok(())
    })
}
