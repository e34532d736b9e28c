//! C ABI over the quality model and the per-batch adaptation engine.
//!
//! Models are opaque handles created by `tta_model_load` or
//! `tta_model_build` and released with `tta_model_free`. Every fallible
//! call returns a [`TtaStatus`]; on failure the message is available from
//! `tta_last_error_message` on the same thread until the next failing call.
//!
//! Images are passed as one contiguous `n × c × h × w` array of doubles in
//! [0, 1] (planar channels, row-major).

use libc::{c_char, size_t};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use tta_iqa::adaptation::{adapt_batch, DistortionMode, TtaConfig};
use tta_iqa::{ArchConfig, BnMode, DistortionKind, Error, Image, Objective, QualityModel};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TtaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Numeric = 5,
    Panic = 6,
}

/// Adaptation settings. `distortion_mode`: 0 best, 1 all, 2 blur only,
/// 3 compression only, 4 noise only. `objective`: 0 combined, 1 rank only,
/// 2 group-contrastive only, 3 rotation. Booleans are 0 or 1.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TtaParams {
    pub iterations: u32,
    pub lr: f64,
    pub lambda: f64,
    pub p: f64,
    pub tau: f64,
    pub groups: u32,
    pub distortion_mode: i32,
    pub objective: i32,
    pub predict_batch_stats: u8,
    pub seed: u64,
}

/// Opaque model handle.
pub struct TtaModel {
    inner: QualityModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TtaStatus {
    match e {
        Error::Io(_) => TtaStatus::Io,
        Error::Checkpoint(_) | Error::ArchMismatch(_) | Error::Json(_) => TtaStatus::Checkpoint,
        Error::Diverged(_) | Error::Optim(_) => TtaStatus::Numeric,
        _ => TtaStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (TtaStatus, String)>) -> TtaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TtaStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            TtaStatus::Panic
        }
    }
}

fn lift<T>(r: tta_iqa::Result<T>) -> Result<T, (TtaStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (TtaStatus, String) {
    (TtaStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (TtaStatus, String) {
    (TtaStatus::InvalidArgument, msg.into())
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, (TtaStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not valid UTF-8"))
}

unsafe fn model_ref<'a>(m: *const TtaModel) -> Result<&'a TtaModel, (TtaStatus, String)> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn images_arg(
    pixels: *const f64,
    n: size_t,
    c: size_t,
    h: size_t,
    w: size_t,
) -> Result<Vec<Image>, (TtaStatus, String)> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    let per = c.checked_mul(h).and_then(|v| v.checked_mul(w)).ok_or_else(|| invalid("image size overflows"))?;
    let total = per.checked_mul(n).ok_or_else(|| invalid("batch size overflows"))?;
    if n == 0 || per == 0 {
        return Err(invalid("empty batch"));
    }
    let data = std::slice::from_raw_parts(pixels, total);
    data.chunks(per).map(|d| lift(Image::new(h, w, c, d.to_vec()))).collect()
}

fn params_to_config(p: &TtaParams, batch: usize) -> Result<TtaConfig, (TtaStatus, String)> {
    let distortion_mode = match p.distortion_mode {
        0 => DistortionMode::Best,
        1 => DistortionMode::All,
        2 => DistortionMode::Single(DistortionKind::Blur),
        3 => DistortionMode::Single(DistortionKind::Compression),
        4 => DistortionMode::Single(DistortionKind::Noise),
        k => return Err(invalid(format!("unknown distortion_mode {k}"))),
    };
    let objective = match p.objective {
        0 => Objective::Combined,
        1 => Objective::RankOnly,
        2 => Objective::GcOnly,
        3 => Objective::Rotation,
        k => return Err(invalid(format!("unknown objective {k}"))),
    };
    Ok(TtaConfig {
        iterations: p.iterations as usize,
        lr: p.lr,
        lambda: p.lambda,
        p: p.p,
        tau: p.tau,
        groups: p.groups as usize,
        batch_size: batch,
        distortion_mode,
        objective,
        predict_bn_mode: if p.predict_batch_stats != 0 { BnMode::BatchStats } else { BnMode::Eval },
        seeds: vec![p.seed],
        ..TtaConfig::default()
    })
}

/// Defaults used by the Rust library.
#[no_mangle]
pub extern "C" fn tta_params_default() -> TtaParams {
    let d = TtaConfig::default();
    TtaParams {
        iterations: d.iterations as u32,
        lr: d.lr,
        lambda: d.lambda,
        p: d.p,
        tau: d.tau,
        groups: d.groups as u32,
        distortion_mode: 0,
        objective: 0,
        predict_batch_stats: u8::from(d.predict_bn_mode == BnMode::BatchStats),
        seed: 0,
    }
}

/// Message of the last failing call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tta_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Untrained model with the default architecture and the given seed.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn tta_model_build(seed: u64, out: *mut *mut TtaModel) -> TtaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let m = lift(QualityModel::build(ArchConfig { seed, ..ArchConfig::default() }))?;
        *out = Box::into_raw(Box::new(TtaModel { inner: m }));
        Ok(())
    })
}

/// Loads a checkpoint written by the library or the CLI.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tta_model_load(path: *const c_char, out: *mut *mut TtaModel) -> TtaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let m = lift(tta_iqa::model::load_checkpoint(path_arg(path)?))?;
        *out = Box::into_raw(Box::new(TtaModel { inner: m }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tta_model_save(model: *const TtaModel, path: *const c_char) -> TtaStatus {
    guard(|| {
        let m = model_ref(model)?;
        lift(tta_iqa::model::save_checkpoint(&m.inner, path_arg(path)?))
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tta_model_free(model: *mut TtaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the square input the model expects, or 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tta_model_crop(model: *const TtaModel) -> size_t {
    model.as_ref().map_or(0, |m| m.inner.arch().crop)
}

/// Scores `n` images of shape `c × crop × crop` with the source model.
/// `batch_stats` selects current-batch BN statistics instead of running ones.
///
/// # Safety
/// `pixels` must hold `n·c·h·w` doubles and `out_scores` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn tta_model_predict(
    model: *const TtaModel,
    pixels: *const f64,
    n: size_t,
    c: size_t,
    h: size_t,
    w: size_t,
    batch_stats: u8,
    out_scores: *mut f64,
) -> TtaStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out_scores.is_null() {
            return Err(null("out_scores"));
        }
        let imgs = images_arg(pixels, n, c, h, w)?;
        let crop = m.inner.arch().crop;
        let views = lift(imgs.iter().map(|im| tta_iqa::adaptation::scoring_view(im, crop)).collect::<tta_iqa::Result<Vec<_>>>())?;
        let mode = if batch_stats != 0 { BnMode::BatchStats } else { BnMode::Eval };
        let scores = lift(m.inner.predict_quality(&views, mode))?;
        std::slice::from_raw_parts_mut(out_scores, n).copy_from_slice(&scores);
        Ok(())
    })
}

/// Adapts a private copy of the model on this batch and writes adapted
/// scores; the handle itself is never modified. `out_flagged` (optional)
/// receives 1 when the batch fell back to source scores.
///
/// # Safety
/// As [`tta_model_predict`]; `params` must be null (defaults) or valid.
#[no_mangle]
pub unsafe extern "C" fn tta_model_adapt_predict(
    model: *const TtaModel,
    pixels: *const f64,
    n: size_t,
    c: size_t,
    h: size_t,
    w: size_t,
    params: *const TtaParams,
    out_scores: *mut f64,
    out_flagged: *mut u8,
) -> TtaStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out_scores.is_null() {
            return Err(null("out_scores"));
        }
        let imgs = images_arg(pixels, n, c, h, w)?;
        let p = params.as_ref().copied().unwrap_or_else(|| tta_params_default());
        let cfg = params_to_config(&p, n.max(2))?;
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let r = lift(adapt_batch(&m.inner.snapshot(), &imgs, &cfg, &mut rng))?;
        std::slice::from_raw_parts_mut(out_scores, n).copy_from_slice(&r.adapted_scores);
        if let Some(f) = out_flagged.as_mut() {
            *f = u8::from(r.flagged.is_some());
        }
        Ok(())
    })
}

unsafe fn metric(
    f: fn(&[f64], &[f64]) -> tta_iqa::Result<f64>,
    pred: *const f64,
    gt: *const f64,
    n: size_t,
    out: *mut f64,
) -> TtaStatus {
    guard(|| {
        if pred.is_null() || gt.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let v = lift(f(std::slice::from_raw_parts(pred, n), std::slice::from_raw_parts(gt, n)))?;
        *out = v;
        if v.is_nan() {
            return Err((TtaStatus::Numeric, "correlation undefined: zero variance".into()));
        }
        Ok(())
    })
}

/// Spearman rank correlation with midranks. Zero variance writes NaN and
/// returns `TTA_STATUS_NUMERIC`.
///
/// # Safety
/// `pred` and `gt` must hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tta_srocc(pred: *const f64, gt: *const f64, n: size_t, out: *mut f64) -> TtaStatus {
    metric(tta_iqa::srocc, pred, gt, n, out)
}

/// Pearson correlation. Same conventions as [`tta_srocc`].
///
/// # Safety
/// As [`tta_srocc`].
#[no_mangle]
pub unsafe extern "C" fn tta_plcc(pred: *const f64, gt: *const f64, n: size_t, out: *mut f64) -> TtaStatus {
    metric(tta_iqa::plcc, pred, gt, n, out)
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn tta_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
