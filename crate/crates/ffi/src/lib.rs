//! C ABI for the depthfill toolkit.
//!
//! Conventions:
//! - every object is an opaque handle created by a `df_*` constructor and
//!   released by its matching `df_*_free`;
//! - every fallible call returns a [`DfStatus`]; on failure
//!   [`df_last_error_message`] holds a thread-local description;
//! - borrowed pointers returned by accessor functions stay valid until the
//!   owning handle is freed.

#![allow(non_camel_case_types)]
// Pointer contracts are stated in the crate docs above and per function;
// the conventional `# Safety` section per item would repeat them 25 times.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use depthfill::attention::TransferMode;
use depthfill::image::{DisparityImage, HoleMask, NormalMap};
use depthfill::io as dio;
use depthfill::losses::LossWeights;
use depthfill::metrics;
use depthfill::model::checkpoint::Checkpoint;
use depthfill::model::train::{inpaint, train};
use depthfill::model::TrainConfig;
use depthfill::normals::normals_from_disparity;
use depthfill::scene::{synth_mask, synth_scene, random_scene_spec, SyntheticStream};
use depthfill::Error;

/// Status code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DfStatus {
    DfOk = 0,
    DfErrDimension = 1,
    DfErrDomain = 2,
    DfErrContract = 3,
    DfErrSpec = 4,
    DfErrParse = 5,
    DfErrNumeric = 6,
    DfErrIo = 7,
    DfErrNullArgument = 8,
    DfErrUtf8 = 9,
    DfErrPanic = 10,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', "?")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> DfStatus {
    match e {
        Error::Dimension(_) => DfStatus::DfErrDimension,
        Error::Domain(_) => DfStatus::DfErrDomain,
        Error::Contract(_) => DfStatus::DfErrContract,
        Error::Spec(_) => DfStatus::DfErrSpec,
        Error::Parse { .. } => DfStatus::DfErrParse,
        Error::Numeric { .. } => DfStatus::DfErrNumeric,
        Error::Io(_) => DfStatus::DfErrIo,
    }
}

fn fail(e: Error) -> DfStatus {
    set_error(&e.to_string());
    status_of(&e)
}

/// Run a fallible body, translating panics and errors into status codes.
fn guarded(body: impl FnOnce() -> Result<(), DfStatus>) -> DfStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => DfStatus::DfOk,
        Ok(Err(status)) => status,
        Err(_) => {
            set_error("internal panic");
            DfStatus::DfErrPanic
        }
    }
}

fn path_from(ptr: *const c_char) -> Result<PathBuf, DfStatus> {
    if ptr.is_null() {
        set_error("null path");
        return Err(DfStatus::DfErrNullArgument);
    }
    let s = unsafe { CStr::from_ptr(ptr) };
    s.to_str().map(PathBuf::from).map_err(|_| {
        set_error("path is not valid utf-8");
        DfStatus::DfErrUtf8
    })
}

unsafe fn out_ref<'a, T>(ptr: *mut T) -> Result<&'a mut T, DfStatus> {
    if ptr.is_null() {
        set_error("null output pointer");
        return Err(DfStatus::DfErrNullArgument);
    }
    Ok(&mut *ptr)
}

unsafe fn handle_ref<'a, T>(ptr: *const T) -> Result<&'a T, DfStatus> {
    if ptr.is_null() {
        set_error("null handle");
        return Err(DfStatus::DfErrNullArgument);
    }
    Ok(&*ptr)
}

/// Opaque disparity image handle.
pub struct df_disparity {
    inner: DisparityImage,
    valid_cache: Vec<u8>,
}

/// Opaque surface-normal map handle.
pub struct df_normal_map {
    inner: NormalMap,
}

/// Opaque hole-mask handle.
pub struct df_mask {
    inner: HoleMask,
    flag_cache: Vec<u8>,
}

/// Opaque trained-model handle.
pub struct df_checkpoint {
    inner: Checkpoint,
}

/// Flat copy of a metric report; undefined correlations are NaN.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct df_metric_report {
    pub mse: f64,
    pub ve: f64,
    pub js_depth: f64,
    pub js_surface: f64,
    pub kl_depth: f64,
    pub kl_surface: f64,
    pub wasserstein_depth: f64,
    pub wasserstein_surface: f64,
    pub intersection_depth: f64,
    pub intersection_surface: f64,
    pub correlation_depth: f64,
    pub correlation_surface: f64,
}

/// Training options for `df_train`. Zeroed fields fall back to defaults
/// via `df_train_config_default`.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct df_train_config {
    pub image_size: usize,
    pub hole_size: usize,
    pub steps: usize,
    pub batch: usize,
    pub width: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub phi: f64,
    pub lambda_gp: f64,
    pub n_critic: usize,
    pub lr: f64,
    pub sigma: f64,
    pub surface_attention: bool,
    pub surface_discrimination: bool,
}

fn wrap_disparity(d: DisparityImage) -> *mut df_disparity {
    let valid_cache = d.valid().iter().map(|&b| b as u8).collect();
    Box::into_raw(Box::new(df_disparity { inner: d, valid_cache }))
}

/// Library version string; static storage.
#[no_mangle]
pub extern "C" fn df_version() -> *const c_char {
    concat!("depthfill ", env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the most recent failure on this thread.
#[no_mangle]
pub extern "C" fn df_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

// ── Disparity images ────────────────────────────────────────────────

/// Create a disparity image from row-major values. `valid` may be NULL
/// (all pixels valid) or one byte per pixel (0 = invalid).
#[no_mangle]
pub unsafe extern "C" fn df_disparity_create(
    height: usize,
    width: usize,
    values: *const f64,
    valid: *const u8,
    out: *mut *mut df_disparity,
) -> DfStatus {
    guarded(|| {
        let out = out_ref(out)?;
        if values.is_null() {
            set_error("null values");
            return Err(DfStatus::DfErrNullArgument);
        }
        let v = std::slice::from_raw_parts(values, height * width).to_vec();
        let ok = if valid.is_null() {
            vec![true; height * width]
        } else {
            std::slice::from_raw_parts(valid, height * width).iter().map(|&b| b != 0).collect()
        };
        let d = DisparityImage::new(height, width, v, ok).map_err(fail)?;
        *out = wrap_disparity(d);
        Ok(())
    })
}

/// Read a `.pgm` or `.pfm` disparity file; `cityscapes` applies the
/// (p-1)/256 convention to 16-bit PGM samples.
#[no_mangle]
pub unsafe extern "C" fn df_disparity_read(
    path: *const c_char,
    cityscapes: bool,
    out: *mut *mut df_disparity,
) -> DfStatus {
    guarded(|| {
        let out = out_ref(out)?;
        let path = path_from(path)?;
        let d = dio::read_disparity_auto(&path, cityscapes).map_err(fail)?;
        *out = wrap_disparity(d);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn df_disparity_write_pgm(
    d: *const df_disparity,
    path: *const c_char,
    scale: f64,
) -> DfStatus {
    guarded(|| {
        let d = handle_ref(d)?;
        let path = path_from(path)?;
        dio::write_pgm16(&path, &d.inner, scale, &[]).map_err(fail)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn df_disparity_write_pfm(
    d: *const df_disparity,
    path: *const c_char,
) -> DfStatus {
    guarded(|| {
        let d = handle_ref(d)?;
        let path = path_from(path)?;
        dio::write_pfm_disparity(&path, &d.inner).map_err(fail)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn df_disparity_dims(
    d: *const df_disparity,
    height: *mut usize,
    width: *mut usize,
) -> DfStatus {
    guarded(|| {
        let d = handle_ref(d)?;
        *out_ref(height)? = d.inner.height();
        *out_ref(width)? = d.inner.width();
        Ok(())
    })
}

/// Borrow the row-major values; valid until the handle is freed.
#[no_mangle]
pub unsafe extern "C" fn df_disparity_values(
    d: *const df_disparity,
    values: *mut *const f64,
    len: *mut usize,
) -> DfStatus {
    guarded(|| {
        let d = handle_ref(d)?;
        *out_ref(values)? = d.inner.values().as_ptr();
        *out_ref(len)? = d.inner.values().len();
        Ok(())
    })
}

/// Borrow the per-pixel validity flags (1 = valid).
#[no_mangle]
pub unsafe extern "C" fn df_disparity_valid(
    d: *const df_disparity,
    valid: *mut *const u8,
    len: *mut usize,
) -> DfStatus {
    guarded(|| {
        let d = handle_ref(d)?;
        *out_ref(valid)? = d.valid_cache.as_ptr();
        *out_ref(len)? = d.valid_cache.len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn df_disparity_free(d: *mut df_disparity) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

// ── Masks ───────────────────────────────────────────────────────────

/// Create a hole mask from one byte per pixel (non-zero = hole).
#[no_mangle]
pub unsafe extern "C" fn df_mask_create(
    height: usize,
    width: usize,
    hole: *const u8,
    out: *mut *mut df_mask,
) -> DfStatus {
    guarded(|| {
        let out = out_ref(out)?;
        if hole.is_null() {
            set_error("null mask");
            return Err(DfStatus::DfErrNullArgument);
        }
        let flags: Vec<bool> =
            std::slice::from_raw_parts(hole, height * width).iter().map(|&b| b != 0).collect();
        let m = HoleMask::new(height, width, flags).map_err(fail)?;
        let flag_cache = m.flags().iter().map(|&b| b as u8).collect();
        *out = Box::into_raw(Box::new(df_mask { inner: m, flag_cache }));
        Ok(())
    })
}

/// Square hole with the given top-left corner and side.
#[no_mangle]
pub unsafe extern "C" fn df_mask_square(
    height: usize,
    width: usize,
    top: usize,
    left: usize,
    side: usize,
    out: *mut *mut df_mask,
) -> DfStatus {
    guarded(|| {
        let out = out_ref(out)?;
        let m = HoleMask::square(height, width, top, left, side).map_err(fail)?;
        let flag_cache = m.flags().iter().map(|&b| b as u8).collect();
        *out = Box::into_raw(Box::new(df_mask { inner: m, flag_cache }));
        Ok(())
    })
}

/// Sample a uniformly placed square hole (margin 1).
#[no_mangle]
pub unsafe extern "C" fn df_mask_synth(
    size: usize,
    hole: usize,
    seed: u64,
    out: *mut *mut df_mask,
) -> DfStatus {
    guarded(|| {
        let out = out_ref(out)?;
        let m = synth_mask(size, hole, seed).map_err(fail)?;
        let flag_cache = m.flags().iter().map(|&b| b as u8).collect();
        *out = Box::into_raw(Box::new(df_mask { inner: m, flag_cache }));
        Ok(())
    })
}

/// Borrow the hole flags (1 = hole), row-major.
#[no_mangle]
pub unsafe extern "C" fn df_mask_flags(
    m: *const df_mask,
    flags: *mut *const u8,
    len: *mut usize,
) -> DfStatus {
    guarded(|| {
        let m = handle_ref(m)?;
        *out_ref(flags)? = m.flag_cache.as_ptr();
        *out_ref(len)? = m.flag_cache.len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn df_mask_free(m: *mut df_mask) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

// ── Normals ─────────────────────────────────────────────────────────

/// Unit surface normals from disparity gradients.
#[no_mangle]
pub unsafe extern "C" fn df_normals_compute(
    d: *const df_disparity,
    out: *mut *mut df_normal_map,
) -> DfStatus {
    guarded(|| {
        let out = out_ref(out)?;
        let d = handle_ref(d)?;
        let n = normals_from_disparity(&d.inner).map_err(fail)?;
        *out = Box::into_raw(Box::new(df_normal_map { inner: n }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn df_normal_map_dims(
    n: *const df_normal_map,
    height: *mut usize,
    width: *mut usize,
) -> DfStatus {
    guarded(|| {
        let n = handle_ref(n)?;
        *out_ref(height)? = n.inner.height();
        *out_ref(width)? = n.inner.width();
        Ok(())
    })
}

/// Borrow the planar components: n_x plane, then n_y, then n_z.
#[no_mangle]
pub unsafe extern "C" fn df_normal_map_components(
    n: *const df_normal_map,
    components: *mut *const f64,
    len: *mut usize,
) -> DfStatus {
    guarded(|| {
        let n = handle_ref(n)?;
        *out_ref(components)? = n.inner.components().as_ptr();
        *out_ref(len)? = n.inner.components().len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn df_normal_map_write_pfm(
    n: *const df_normal_map,
    path: *const c_char,
) -> DfStatus {
    guarded(|| {
        let n = handle_ref(n)?;
        let path = path_from(path)?;
        dio::write_pfm_normals(&path, &n.inner).map_err(fail)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn df_normal_map_free(n: *mut df_normal_map) {
    if !n.is_null() {
        drop(Box::from_raw(n));
    }
}

// ── Scenes ──────────────────────────────────────────────────────────

/// Synthesise a random piecewise-planar disparity scene.
#[no_mangle]
pub unsafe extern "C" fn df_scene_synth(
    size: usize,
    sigma: f64,
    seed: u64,
    out: *mut *mut df_disparity,
) -> DfStatus {
    guarded(|| {
        let out = out_ref(out)?;
        let mut spec = random_scene_spec(size, size, seed);
        spec.noise_sigma = sigma;
        let scene = synth_scene(&spec).map_err(fail)?;
        *out = wrap_disparity(scene.disparity);
        Ok(())
    })
}

// ── Training / inpainting / evaluation ─────────────────────────────

/// Defaults matching the library's training configuration.
#[no_mangle]
pub extern "C" fn df_train_config_default() -> df_train_config {
    let cfg = TrainConfig::default();
    df_train_config {
        image_size: cfg.image_size,
        hole_size: cfg.hole_size,
        steps: cfg.steps,
        batch: cfg.batch,
        width: cfg.width,
        seed: cfg.seed,
        alpha: cfg.weights.alpha,
        beta: cfg.weights.beta,
        phi: cfg.weights.phi,
        lambda_gp: cfg.weights.lambda_gp,
        n_critic: cfg.weights.n_critic,
        lr: cfg.lr,
        sigma: cfg.sigma,
        surface_attention: cfg.surface_attention_on,
        surface_discrimination: cfg.surface_discrimination_on,
    }
}

/// Train on the internal synthetic-scene stream and return the checkpoint.
#[no_mangle]
pub unsafe extern "C" fn df_train(
    cfg: df_train_config,
    out: *mut *mut df_checkpoint,
) -> DfStatus {
    guarded(|| {
        let out = out_ref(out)?;
        let config = TrainConfig {
            image_size: cfg.image_size,
            hole_size: cfg.hole_size,
            batch: cfg.batch,
            steps: cfg.steps,
            lr: cfg.lr,
            weights: LossWeights {
                alpha: cfg.alpha,
                beta: cfg.beta,
                phi: cfg.phi,
                lambda_gp: cfg.lambda_gp,
                n_critic: cfg.n_critic,
            },
            seed: cfg.seed,
            width: cfg.width,
            vectorial_loss_on: cfg.alpha > 0.0,
            surface_attention_on: cfg.surface_attention,
            surface_discrimination_on: cfg.surface_discrimination,
            sigma: cfg.sigma,
            ..TrainConfig::default()
        };
        let mut stream = SyntheticStream::new(cfg.image_size, cfg.hole_size, cfg.sigma, cfg.seed);
        let (ckpt, _log) = train(&config, &mut stream).map_err(fail)?;
        *out = Box::into_raw(Box::new(df_checkpoint { inner: ckpt }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn df_checkpoint_load(
    path: *const c_char,
    out: *mut *mut df_checkpoint,
) -> DfStatus {
    guarded(|| {
        let out = out_ref(out)?;
        let path = path_from(path)?;
        let ckpt = Checkpoint::load(&path).map_err(fail)?;
        *out = Box::into_raw(Box::new(df_checkpoint { inner: ckpt }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn df_checkpoint_save(
    ckpt: *const df_checkpoint,
    path: *const c_char,
) -> DfStatus {
    guarded(|| {
        let ckpt = handle_ref(ckpt)?;
        let path = path_from(path)?;
        ckpt.inner.save(&path).map_err(fail)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn df_checkpoint_free(ckpt: *mut df_checkpoint) {
    if !ckpt.is_null() {
        drop(Box::from_raw(ckpt));
    }
}

/// Fill the hole of a disparity image; `blend` switches the attention
/// transfer from argmax to softmax blending.
#[no_mangle]
pub unsafe extern "C" fn df_inpaint(
    ckpt: *const df_checkpoint,
    d: *const df_disparity,
    mask: *const df_mask,
    blend: bool,
    out: *mut *mut df_disparity,
) -> DfStatus {
    guarded(|| {
        let out = out_ref(out)?;
        let ckpt = handle_ref(ckpt)?;
        let d = handle_ref(d)?;
        let mask = handle_ref(mask)?;
        let mode = if blend { TransferMode::Blend } else { TransferMode::Argmax };
        let filled = inpaint(&ckpt.inner, &d.inner, &mask.inner, mode).map_err(fail)?;
        *out = wrap_disparity(filled);
        Ok(())
    })
}

/// Every metric for a ground-truth/generated pair over the masked region.
#[no_mangle]
pub unsafe extern "C" fn df_evaluate(
    gt: *const df_disparity,
    gen: *const df_disparity,
    region: *const df_mask,
    depth_bins: usize,
    surface_bins: usize,
    out: *mut df_metric_report,
) -> DfStatus {
    guarded(|| {
        let out = out_ref(out)?;
        let gt = handle_ref(gt)?;
        let gen = handle_ref(gen)?;
        let region = handle_ref(region)?;
        let r = metrics::evaluate_pair(&gt.inner, &gen.inner, &region.inner, depth_bins, surface_bins)
            .map_err(fail)?;
        *out = df_metric_report {
            mse: r.mse,
            ve: r.ve,
            js_depth: r.depth.js,
            js_surface: r.surface.js,
            kl_depth: r.depth.kl,
            kl_surface: r.surface.kl,
            wasserstein_depth: r.depth.wasserstein,
            wasserstein_surface: r.surface.wasserstein,
            intersection_depth: r.depth.intersection,
            intersection_surface: r.surface.intersection,
            correlation_depth: r.depth.correlation.unwrap_or(f64::NAN),
            correlation_surface: r.surface.correlation.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}
