//! C ABI for the branchline library.
//!
//! Opaque handles own the Rust state; every fallible call returns a
//! `BlcStatus` and stores a human-readable message retrievable through
//! [`blc_last_error_message`]. Buffers are caller-allocated; query the
//! model's shape first and size them as documented per function.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::path::Path;

use ndarray::Array3;

use branchline::curvefit::{mask_to_positions_with, CurveFitConfig, FitKind};
use branchline::mask::MaskImage;
use branchline::metrics::{pearson_series, rmse_series};
use branchline::regressor::{self, ModelState};
use branchline::segbaseline::{self, SegModelState};

/// Call outcome; mirrors the CLI exit-code classes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlcStatus {
    Ok = 0,
    /// Bad arguments, shapes or file contents.
    InvalidArgument = 2,
    /// I/O failure (missing or unreadable file).
    IoError = 4,
    /// Anything else.
    Internal = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = sanitized);
}

fn fail(status: BlcStatus, msg: &str) -> BlcStatus {
    set_error(msg);
    status
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn blc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn blc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Opaque trained coordinate-regression model.
pub struct BlcRegressor(ModelState);

/// Opaque trained segmentation model.
pub struct BlcSegModel(SegModelState);

unsafe fn cstr_path<'a>(path: *const c_char) -> Result<&'a Path, BlcStatus> {
    if path.is_null() {
        set_error("path is NULL");
        return Err(BlcStatus::InvalidArgument);
    }
    match CStr::from_ptr(path).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(BlcStatus::InvalidArgument)
        }
    }
}

/// Load a regressor checkpoint written by `branchline train --model hob`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer. On
/// success `*out` owns the model; release it with [`blc_regressor_free`].
#[no_mangle]
pub unsafe extern "C" fn blc_regressor_load(
    path: *const c_char,
    out: *mut *mut BlcRegressor,
) -> BlcStatus {
    if out.is_null() {
        return fail(BlcStatus::InvalidArgument, "out is NULL");
    }
    let path = match cstr_path(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match regressor::load_model(path) {
        Ok(state) => {
            *out = Box::into_raw(Box::new(BlcRegressor(state)));
            BlcStatus::Ok
        }
        Err(e) => fail(BlcStatus::IoError, &e.to_string()),
    }
}

/// # Safety
/// `handle` must come from [`blc_regressor_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn blc_regressor_free(handle: *mut BlcRegressor) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Input geometry of a loaded regressor: channels, scan length (rows),
/// coordinate extent (columns) and branch channels.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn blc_regressor_shape(
    handle: *const BlcRegressor,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
    n_branches: *mut usize,
) -> BlcStatus {
    if handle.is_null()
        || channels.is_null()
        || height.is_null()
        || width.is_null()
        || n_branches.is_null()
    {
        return fail(BlcStatus::InvalidArgument, "NULL pointer argument");
    }
    let spec = &(*handle).0.spec;
    *channels = spec.input.0;
    *height = spec.input.1;
    *width = spec.input.2;
    *n_branches = spec.n_branches;
    BlcStatus::Ok
}

/// Predict per-row branch coordinates for one image.
///
/// `pixels` is interleaved row-major u8 data with exactly
/// `height * width * channels` bytes (channel order RGB, plus depth last
/// when the model was trained with 4 channels). `out_coords` receives
/// `n_branches * height` values in pixels, branch-major; a coordinate is
/// emitted for every row.
///
/// # Safety
/// Buffers must match the sizes above.
#[no_mangle]
pub unsafe extern "C" fn blc_regressor_predict(
    handle: *const BlcRegressor,
    pixels: *const u8,
    pixels_len: usize,
    out_coords: *mut f64,
    out_len: usize,
) -> BlcStatus {
    if handle.is_null() || pixels.is_null() || out_coords.is_null() {
        return fail(BlcStatus::InvalidArgument, "NULL pointer argument");
    }
    let state = &(*handle).0;
    let (c, h, w) = state.spec.input;
    if pixels_len != c * h * w {
        return fail(
            BlcStatus::InvalidArgument,
            &format!("expected {} pixel bytes, got {pixels_len}", c * h * w),
        );
    }
    let expected_out = state.spec.n_branches * h;
    if out_len != expected_out {
        return fail(
            BlcStatus::InvalidArgument,
            &format!("expected out_len {expected_out}, got {out_len}"),
        );
    }
    let data = std::slice::from_raw_parts(pixels, pixels_len);
    let image = Array3::from_shape_fn((c, h, w), |(ci, y, x)| {
        data[(y * w + x) * c + ci] as f64 / 255.0
    });
    match regressor::predict_positions(state, &image) {
        Ok(target) => {
            let out = std::slice::from_raw_parts_mut(out_coords, out_len);
            for (b, ch) in target.coords.iter().enumerate() {
                out[b * h..(b + 1) * h].copy_from_slice(ch);
            }
            BlcStatus::Ok
        }
        Err(e) => fail(BlcStatus::InvalidArgument, &e.to_string()),
    }
}

/// Load a segmentation checkpoint (`seg_visible` or `seg_whole`).
///
/// # Safety
/// As [`blc_regressor_load`]; release with [`blc_segmodel_free`].
#[no_mangle]
pub unsafe extern "C" fn blc_segmodel_load(
    path: *const c_char,
    out: *mut *mut BlcSegModel,
) -> BlcStatus {
    if out.is_null() {
        return fail(BlcStatus::InvalidArgument, "out is NULL");
    }
    let path = match cstr_path(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match segbaseline::load_model(path) {
        Ok(state) => {
            *out = Box::into_raw(Box::new(BlcSegModel(state)));
            BlcStatus::Ok
        }
        Err(e) => fail(BlcStatus::IoError, &e.to_string()),
    }
}

/// # Safety
/// `handle` must come from [`blc_segmodel_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn blc_segmodel_free(handle: *mut BlcSegModel) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Segment one image into a binary mask (1 = branch), thresholding the
/// sigmoid output at `threshold`. Pixel layout follows
/// [`blc_regressor_predict`]; `out_mask` holds `height * width` bytes.
///
/// # Safety
/// Buffers must match the model's input shape.
#[no_mangle]
pub unsafe extern "C" fn blc_segmodel_segment(
    handle: *const BlcSegModel,
    pixels: *const u8,
    pixels_len: usize,
    threshold: f64,
    out_mask: *mut u8,
    out_len: usize,
) -> BlcStatus {
    if handle.is_null() || pixels.is_null() || out_mask.is_null() {
        return fail(BlcStatus::InvalidArgument, "NULL pointer argument");
    }
    let state = &(*handle).0;
    let (c, h, w) = state.spec.input;
    if pixels_len != c * h * w || out_len != h * w {
        return fail(
            BlcStatus::InvalidArgument,
            &format!(
                "expected {} pixel bytes and {} mask bytes, got {pixels_len} and {out_len}",
                c * h * w,
                h * w
            ),
        );
    }
    let data = std::slice::from_raw_parts(pixels, pixels_len);
    let image = Array3::from_shape_fn((c, h, w), |(ci, y, x)| {
        data[(y * w + x) * c + ci] as f64 / 255.0
    });
    match segbaseline::segment(state, &image, threshold) {
        Ok(mask) => {
            let out = std::slice::from_raw_parts_mut(out_mask, out_len);
            for y in 0..h {
                for x in 0..w {
                    out[y * w + x] = u8::from(mask.get(x, y));
                }
            }
            BlcStatus::Ok
        }
        Err(e) => fail(BlcStatus::InvalidArgument, &e.to_string()),
    }
}

/// Convert a binary mask into per-row branch coordinates via the blob
/// filter → waypoint → split → polynomial-fit pipeline.
///
/// `mask` holds `width * height` bytes (nonzero = foreground). `out_coords`
/// receives `n_branches * height` clamped coordinates, branch-major;
/// `out_valid` receives `height` flags (1 where the pipeline produced a
/// row). Rows without coverage keep coordinate 0 and flag 0.
///
/// # Safety
/// Buffers must match the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn blc_mask_to_positions(
    mask: *const u8,
    width: usize,
    height: usize,
    n_branches: usize,
    min_blob_area: usize,
    poly_order: usize,
    out_coords: *mut f64,
    out_valid: *mut u8,
) -> BlcStatus {
    if mask.is_null() || out_coords.is_null() || out_valid.is_null() {
        return fail(BlcStatus::InvalidArgument, "NULL pointer argument");
    }
    if width == 0 || height == 0 {
        return fail(BlcStatus::InvalidArgument, "empty mask dimensions");
    }
    let data = std::slice::from_raw_parts(mask, width * height);
    let m = MaskImage::from_fn(width, height, |x, y| data[y * width + x] != 0);
    let cfg = CurveFitConfig {
        min_blob_area,
        order: poly_order,
        fit: FitKind::Polynomial,
    };
    match mask_to_positions_with(&m, n_branches, height, &cfg) {
        Ok((target, _)) => {
            let coords = std::slice::from_raw_parts_mut(out_coords, n_branches * height);
            let valid = std::slice::from_raw_parts_mut(out_valid, height);
            for (b, ch) in target.coords.iter().enumerate() {
                coords[b * height..(b + 1) * height].copy_from_slice(ch);
            }
            for (r, &v) in target.valid.iter().enumerate() {
                valid[r] = u8::from(v);
            }
            BlcStatus::Ok
        }
        Err(e) => fail(BlcStatus::InvalidArgument, &e.to_string()),
    }
}

/// RMSE between two equal-length coordinate series.
///
/// # Safety
/// Both series must hold `len` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn blc_rmse(
    gt: *const f64,
    pred: *const f64,
    len: usize,
    out: *mut f64,
) -> BlcStatus {
    if gt.is_null() || pred.is_null() || out.is_null() {
        return fail(BlcStatus::InvalidArgument, "NULL pointer argument");
    }
    let g = std::slice::from_raw_parts(gt, len);
    let p = std::slice::from_raw_parts(pred, len);
    match rmse_series(g, p) {
        Ok(v) => {
            *out = v;
            BlcStatus::Ok
        }
        Err(e) => fail(BlcStatus::InvalidArgument, &e.to_string()),
    }
}

/// Pearson correlation between two equal-length coordinate series.
///
/// # Safety
/// Both series must hold `len` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn blc_pearson_r(
    gt: *const f64,
    pred: *const f64,
    len: usize,
    out: *mut f64,
) -> BlcStatus {
    if gt.is_null() || pred.is_null() || out.is_null() {
        return fail(BlcStatus::InvalidArgument, "NULL pointer argument");
    }
    let g = std::slice::from_raw_parts(gt, len);
    let p = std::slice::from_raw_parts(pred, len);
    match pearson_series(g, p) {
        Ok(v) => {
            *out = v;
            BlcStatus::Ok
        }
        Err(e) => fail(BlcStatus::InvalidArgument, &e.to_string()),
    }
}
