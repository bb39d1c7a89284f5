//! C ABI over the core library.
//!
//! Every function returns a [`CcdStatus`]; on failure the message is
//! available from [`ccd_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use ccd_core::datasets::{build_factor_space_with, render, DatasetKind, FactorSpace, Resolution, SpaceOptions};
use ccd_core::evaluation::{infer_task_edges, mic, mic_score, MicConfig};
use ccd_core::model::ModelState;
use ccd_core::scm::clip_a;
use ccd_core::training::load_checkpoint;
use ccd_core::Error;
use ndarray::{Array1, Array2};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidConfig = 2,
    Contract = 3,
    OutOfBounds = 4,
    Numerical = 5,
    Io = 6,
    Format = 7,
    Failed = 8,
    Panic = 9,
}

/// Factor grid and renderer for one dataset.
pub struct CcdSpace(FactorSpace);

/// Trained model restored from a checkpoint.
pub struct CcdModel(ModelState);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> CcdStatus {
    match e {
        Error::Config(_) => CcdStatus::InvalidConfig,
        Error::Bounds { .. } => CcdStatus::OutOfBounds,
        Error::Contract(_) | Error::TaskTooSmall { .. } => CcdStatus::Contract,
        Error::Numerical { .. } => CcdStatus::Numerical,
        Error::Io(_) => CcdStatus::Io,
        Error::Format { .. } | Error::Json(_) | Error::Csv(_) => CcdStatus::Format,
        Error::TrainingFailed(_) => CcdStatus::Failed,
    }
}

struct Fail(CcdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CcdStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CcdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CcdStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CcdStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CcdStatus::InvalidConfig, format!("`{what}` is not UTF-8")))
}

unsafe fn put<T>(p: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    *p = v;
    Ok(())
}

/// Message of the last failed call on this thread (empty after success).
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ccd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Build a factor space. `dataset` is `dsprites_like` or `shapes3d_like`;
/// `mini` selects the reduced grid.
///
/// # Safety
/// `dataset` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ccd_space_new(
    dataset: *const c_char,
    mini: bool,
    image_size: usize,
    colors: usize,
    out: *mut *mut CcdSpace,
) -> CcdStatus {
    guard(|| {
        let kind: DatasetKind = text(dataset, "dataset")?.parse()?;
        let resolution = if mini { Resolution::Mini } else { Resolution::FullGrid };
        let space = build_factor_space_with(
            kind,
            resolution,
            SpaceOptions {
                image_size,
                dsprites_colors: colors,
            },
        )?;
        put(out, Box::into_raw(Box::new(CcdSpace(space))), "out")
    })
}

/// # Safety
/// `space` must come from [`ccd_space_new`] (or be null) and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn ccd_space_free(space: *mut CcdSpace) {
    if !space.is_null() {
        drop(Box::from_raw(space));
    }
}

/// Number of factors, pixels per image and number of grid points.
///
/// # Safety
/// `space` must be a live handle; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ccd_space_dims(
    space: *const CcdSpace,
    factors: *mut usize,
    pixels: *mut usize,
    grid_points: *mut usize,
) -> CcdStatus {
    guard(|| {
        let s = &space.as_ref().ok_or_else(|| null("space"))?.0;
        put(factors, s.m(), "factors")?;
        put(pixels, s.image.pixels(), "pixels")?;
        put(grid_points, s.corpus_len(), "grid_points")
    })
}

/// Render the image with per-factor grid indices `factor_index`
/// (`factors` entries) into `pixels` (`pixel_len` floats, HWC order) and
/// its normalized labels into `labels` (`factors` doubles, may be null).
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn ccd_render(
    space: *const CcdSpace,
    factor_index: *const usize,
    factors: usize,
    pixels: *mut f32,
    pixel_len: usize,
    labels: *mut f64,
) -> CcdStatus {
    guard(|| {
        let s = &space.as_ref().ok_or_else(|| null("space"))?.0;
        let idx = input(factor_index, factors, "factor_index")?;
        let sample = render(s, idx)?;
        if pixel_len != sample.image.len() {
            return Err(Error::contract(format!("pixel buffer holds {pixel_len}, image has {}", sample.image.len())).into());
        }
        output(pixels, pixel_len, "pixels")?.copy_from_slice(&sample.image);
        if !labels.is_null() {
            output(labels, factors, "labels")?.copy_from_slice(&sample.u);
        }
        Ok(())
    })
}

/// Maximal information coefficient of two samples of length `n`, with the
/// default grid budget.
///
/// # Safety
/// `x` and `y` must hold `n` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ccd_mic(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> CcdStatus {
    guard(|| {
        let v = mic(input(x, n, "x")?, input(y, n, "y")?, &MicConfig::default())?;
        put(out, v, "out")
    })
}

/// Mean matched MIC between label columns and latent dimensions. Both
/// matrices are row-major with `n` rows.
///
/// # Safety
/// `latents` must hold `n * z_dim` and `labels` `n * m` doubles.
#[no_mangle]
pub unsafe extern "C" fn ccd_mic_score(
    latents: *const f64,
    n: usize,
    z_dim: usize,
    labels: *const f64,
    m: usize,
    out: *mut f64,
) -> CcdStatus {
    guard(|| {
        let lat = Array2::from_shape_vec((n, z_dim), input(latents, n * z_dim, "latents")?.to_vec())
            .map_err(|e| Error::contract(e.to_string()))?;
        let lab = Array2::from_shape_vec((n, m), input(labels, n * m, "labels")?.to_vec())
            .map_err(|e| Error::contract(e.to_string()))?;
        put(out, mic_score(&lat, &lab, &MicConfig::default())?.score, "out")
    })
}

/// Scale the row-major `m × n` matrix `a` in place by its largest magnitude
/// and clamp to `[-1, 1]`. An all-zero matrix is left unchanged.
///
/// # Safety
/// `a` must hold `m * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn ccd_clip_a(a: *mut f64, m: usize, n: usize) -> CcdStatus {
    guard(|| {
        let buf = output(a, m * n, "a")?;
        let mat = Array2::from_shape_vec((m, n), buf.to_vec()).map_err(|e| Error::contract(e.to_string()))?;
        if let Some(c) = clip_a(&mat) {
            buf.copy_from_slice(c.as_slice().expect("standard layout"));
        }
        Ok(())
    })
}

/// Infer task factors from predictor weights `w` (`n`) and the row-major
/// causal matrix `a` (`m × n`). `true_factors` lists `n_true` factor
/// positions; `k = 0` selects `n_true` factors. `inferred` receives an
/// `m`-entry 0/1 mask.
///
/// # Safety
/// All buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn ccd_infer_edges(
    w: *const f64,
    n: usize,
    a: *const f64,
    m: usize,
    true_factors: *const usize,
    n_true: usize,
    k: usize,
    fp_margin: f64,
    inferred: *mut u8,
    tp: *mut usize,
    fp: *mut usize,
    fn_: *mut usize,
) -> CcdStatus {
    guard(|| {
        let w = Array1::from(input(w, n, "w")?.to_vec());
        let a = Array2::from_shape_vec((m, n), input(a, m * n, "a")?.to_vec()).map_err(|e| Error::contract(e.to_string()))?;
        let truth: BTreeSet<usize> = input(true_factors, n_true, "true_factors")?.iter().copied().collect();
        let r = infer_task_edges("ffi", w.view(), &a, &truth, (k > 0).then_some(k), fp_margin)?;
        let mask = output(inferred, m, "inferred")?;
        for (j, slot) in mask.iter_mut().enumerate() {
            *slot = r.inferred_factors.contains(&j) as u8;
        }
        put(tp, r.tp, "tp")?;
        put(fp, r.fp, "fp")?;
        put(fn_, r.fn_, "fn")
    })
}

/// Restore the model of a checkpoint directory (`.../checkpoints/epoch_K`).
///
/// # Safety
/// `dir` must be a NUL-terminated path and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ccd_model_load(dir: *const c_char, out: *mut *mut CcdModel) -> CcdStatus {
    guard(|| {
        let state = load_checkpoint(Path::new(text(dir, "dir")?))?;
        put(out, Box::into_raw(Box::new(CcdModel(state.model))), "out")
    })
}

/// # Safety
/// `model` must come from [`ccd_model_load`] (or be null) and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn ccd_model_free(model: *mut CcdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input pixels per image, latent size and factor count.
///
/// # Safety
/// `model` must be live; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ccd_model_dims(
    model: *const CcdModel,
    pixels: *mut usize,
    z_dim: *mut usize,
    factors: *mut usize,
) -> CcdStatus {
    guard(|| {
        let c = &model.as_ref().ok_or_else(|| null("model"))?.0.config;
        put(pixels, c.image.pixels(), "pixels")?;
        put(z_dim, c.z_dim, "z_dim")?;
        put(factors, c.m, "factors")
    })
}

/// Task probabilities for `rows` images (row-major, channel-major pixels as
/// produced by the corpus loader) written to `probs`.
///
/// # Safety
/// `x` must hold `rows * pixels` doubles and `probs` `rows` doubles.
#[no_mangle]
pub unsafe extern "C" fn ccd_model_predict(
    model: *const CcdModel,
    x: *const f64,
    rows: usize,
    pixels: usize,
    probs: *mut f64,
) -> CcdStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        if !m.config.variant.uses_scm() {
            return Err(Error::config(format!("variant {} has no task predictor", m.config.variant)).into());
        }
        let x = Array2::from_shape_vec((rows, pixels), input(x, rows * pixels, "x")?.to_vec())
            .map_err(|e| Error::contract(e.to_string()))?;
        let p = m.predict_proba(&x)?;
        output(probs, rows, "probs")?.copy_from_slice(&p);
        Ok(())
    })
}

/// Posterior means (`rows × z_dim`, row-major) for `rows` images.
///
/// # Safety
/// `x` must hold `rows * pixels` doubles and `out` `rows * z_dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn ccd_model_encode(
    model: *const CcdModel,
    x: *const f64,
    rows: usize,
    pixels: usize,
    out: *mut f64,
) -> CcdStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let x = Array2::from_shape_vec((rows, pixels), input(x, rows * pixels, "x")?.to_vec())
            .map_err(|e| Error::contract(e.to_string()))?;
        let mu = m.posterior_means(&x)?;
        output(out, mu.len(), "out")?.copy_from_slice(mu.as_slice().expect("standard layout"));
        Ok(())
    })
}
