//! C interface to `gradformer`.
//!
//! Models live behind an opaque `GtModel` pointer. Every fallible call returns a
//! `GtStatus`; on failure `gt_last_error` describes the most recent error on the
//! calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use gradformer::error::Error;
use gradformer::graded_space::{apply_grading, GradingSpec, GradingTuple, WeightMap};
use gradformer::graded_transformer::{GradedModel, GradedModelConfig, InputKind, ModelInput};
use gradformer::tensor::Matrix;
use gradformer::training::{anneal_lambda, grade_lr_bound, TrainMode};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    DimensionMismatch = 4,
    Domain = 5,
    Io = 6,
    Checkpoint = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Grading family for `gt_apply_grading`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GtGradingKind {
    /// `f(q) = q + 1`.
    LinearPlusOne = 0,
    /// `f(q) = |q| + 1`.
    LinearAbsPlusOne = 1,
    /// `f(q) = q`.
    LinearIdentity = 2,
    /// `f(q) = a·q + b`.
    LinearAffine = 3,
    /// `λ^q`.
    Exponential = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtGrading {
    pub kind: GtGradingKind,
    pub a: f64,
    pub b: f64,
    pub lambda: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GtMode {
    Lgt = 0,
    Egt = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GtDims {
    /// 1 when the model consumes token ids, 0 for feature rows.
    pub token_input: u32,
    /// Columns per feature row; equals `d_model` for token models.
    pub input_width: usize,
    pub vocab_size: usize,
    pub output_dim: usize,
    pub d_model: usize,
    pub max_len: usize,
}

/// Opaque model handle.
pub struct GtModel {
    inner: GradedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> GtStatus {
    match e {
        Error::DimensionMismatch { .. } | Error::SequenceTooLong { .. } => GtStatus::DimensionMismatch,
        Error::Config(_) | Error::InvalidSpec(_) | Error::Json(_) => GtStatus::Config,
        Error::Io(_) => GtStatus::Io,
        Error::Checkpoint(_) => GtStatus::Checkpoint,
        Error::TokenOutOfRange { .. } | Error::PositionOutOfRange { .. } | Error::StepOutOfRange { .. } => {
            GtStatus::InvalidArgument
        }
        _ => GtStatus::Domain,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (GtStatus, String)>) -> GtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GtStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            GtStatus::Panic
        }
    }
}

fn lib(e: Error) -> (GtStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (GtStatus, String) {
    (GtStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg(p: *const c_char, what: &str) -> Result<String, (GtStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| (GtStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const GtModel) -> Result<&'a GradedModel, (GtStatus, String)> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (GtStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out(out: *mut f64, cap: usize, values: &[f64]) -> Result<(), (GtStatus, String)> {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    if cap < values.len() {
        return Err((
            GtStatus::BufferTooSmall,
            format!("output needs {} values, buffer holds {cap}", values.len()),
        ));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

fn publish(out: *mut *mut GtModel, model: GradedModel) -> Result<(), (GtStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    let handle = Box::into_raw(Box::new(GtModel { inner: model }));
    unsafe { *out = handle };
    Ok(())
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn gt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a model from a JSON model config.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gt_model_create(config_json: *const c_char, seed: u64, out: *mut *mut GtModel) -> GtStatus {
    guard(|| {
        let text = str_arg(config_json, "config_json")?;
        let cfg: GradedModelConfig =
            serde_json::from_str(&text).map_err(|e| (GtStatus::Config, e.to_string()))?;
        publish(out, GradedModel::init(cfg, seed).map_err(lib)?)
    })
}

/// Loads a checkpoint written by `gt_model_save` or the `gradformer` CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gt_model_load(path: *const c_char, out: *mut *mut GtModel) -> GtStatus {
    guard(|| {
        let p = PathBuf::from(str_arg(path, "path")?);
        publish(out, GradedModel::load(&p).map_err(lib)?)
    })
}

/// # Safety
/// `model` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gt_model_save(model: *const GtModel, path: *const c_char) -> GtStatus {
    guard(|| {
        let m = model_ref(model)?;
        let p = PathBuf::from(str_arg(path, "path")?);
        m.save(&p).map_err(lib)
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gt_model_free(model: *mut GtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gt_model_dims(model: *const GtModel, out: *mut GtDims) -> GtStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = &m.config;
        *out = GtDims {
            token_input: u32::from(c.input == InputKind::Tokens),
            input_width: c.input_width(),
            vocab_size: c.base.vocab_size,
            output_dim: c.output_dim,
            d_model: c.base.d_model,
            max_len: c.base.max_len,
        };
        Ok(())
    })
}

unsafe fn forward_into(model: *const GtModel, input: ModelInput, out: *mut f64, out_len: usize) -> Result<(), (GtStatus, String)> {
    let m = model_ref(model)?;
    let logits = m.forward(&input).map_err(lib)?.logits;
    write_out(out, out_len, logits.data())
}

/// Runs a feature model on `rows × cols` row-major inputs and writes
/// `rows × output_dim` row-major logits.
///
/// # Safety
/// `x` must hold `rows*cols` values and `out` at least `out_len`.
#[no_mangle]
pub unsafe extern "C" fn gt_model_forward_features(
    model: *const GtModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
    out_len: usize,
) -> GtStatus {
    guard(|| {
        let data = slice_arg(x, rows * cols, "x")?.to_vec();
        let m = Matrix::new(rows, cols, data).map_err(lib)?;
        forward_into(model, ModelInput::Features(m), out, out_len)
    })
}

/// Runs a token model on `n` ids (1-based) and writes `n × output_dim` logits.
///
/// # Safety
/// `tokens` must hold `n` values and `out` at least `out_len`.
#[no_mangle]
pub unsafe extern "C" fn gt_model_forward_tokens(
    model: *const GtModel,
    tokens: *const u32,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> GtStatus {
    guard(|| {
        let ids = slice_arg(tokens, n, "tokens")?.iter().map(|t| *t as usize).collect();
        forward_into(model, ModelInput::Tokens(ids), out, out_len)
    })
}

/// `λ_t = 1 + (λ_max − 1)·t/T`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gt_anneal_lambda(t: usize, total: usize, lambda_max: f64, out: *mut f64) -> GtStatus {
    guard(|| {
        let v = anneal_lambda(t, total, lambda_max).map_err(lib)?;
        write_out(out, 1, &[v])
    })
}

/// Grade learning-rate bound; `value` is `q_max` for EGT and `q̃_max` for LGT.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gt_grade_lr_bound(mode: GtMode, lambda: f64, value: f64, out: *mut f64) -> GtStatus {
    guard(|| {
        let mode = match mode {
            GtMode::Lgt => TrainMode::Lgt,
            GtMode::Egt => TrainMode::Egt,
        };
        let v = grade_lr_bound(mode, lambda, value).map_err(lib)?;
        write_out(out, 1, &[v])
    })
}

fn spec_of(g: &GtGrading) -> GradingSpec {
    match g.kind {
        GtGradingKind::LinearPlusOne => GradingSpec::linear(WeightMap::PlusOne),
        GtGradingKind::LinearAbsPlusOne => GradingSpec::linear(WeightMap::AbsPlusOne),
        GtGradingKind::LinearIdentity => GradingSpec::linear(WeightMap::Identity),
        GtGradingKind::LinearAffine => GradingSpec::linear(WeightMap::Affine { a: g.a, b: g.b }),
        GtGradingKind::Exponential => GradingSpec::exponential(g.lambda),
    }
}

/// Scales column `j` of the `rows × d` row-major `x` by the grading weight of
/// `grades[j]` and writes the result to `out`.
///
/// # Safety
/// `grades` must hold `d` values, `x` `rows*d`, and `out` at least `out_len`.
#[no_mangle]
pub unsafe extern "C" fn gt_apply_grading(
    grading: *const GtGrading,
    grades: *const f64,
    d: usize,
    x: *const f64,
    rows: usize,
    out: *mut f64,
    out_len: usize,
) -> GtStatus {
    guard(|| {
        let g = grading.as_ref().ok_or_else(|| null("grading"))?;
        let q = GradingTuple::new(slice_arg(grades, d, "grades")?.to_vec()).map_err(lib)?;
        let m = Matrix::new(rows, d, slice_arg(x, rows * d, "x")?.to_vec()).map_err(lib)?;
        let y = apply_grading(&q, &spec_of(g), &m).map_err(lib)?;
        write_out(out, out_len, y.data())
    })
}
