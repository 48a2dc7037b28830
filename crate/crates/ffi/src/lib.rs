//! C ABI over `refer-core`.
//!
//! Every fallible function returns a [`ReferStatus`]; on failure the message
//! is kept per thread and read with [`refer_last_error`]. Handles are opaque
//! and owned by the caller, who releases them with the matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use refer_core::autodiff::softmax;
use refer_core::config::RunConfig;
use refer_core::data;
use refer_core::metrics::{nrg_compose, MetricReport, NrgRow};
use refer_core::models::ModelParams;
use refer_core::topk::{topk_mask, KPercent};
use refer_core::training::evaluate_model;
use refer_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReferStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Contract = 3,
    Degenerate = 4,
    NonFinite = 5,
    Config = 6,
    Parse = 7,
    Io = 8,
    Serialization = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// Metric selector for [`refer_report_metric`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReferMetric {
    SuffAopc = 0,
    CompAopc = 1,
    Tf1 = 2,
    Auprc = 3,
    IouF1 = 4,
    Accuracy = 5,
    MacroF1 = 6,
}

/// Trained or freshly initialized model parameters.
pub struct ReferModel(ModelParams);

/// Evaluation report.
pub struct ReferReport(MetricReport);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Fail(ReferStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Contract(_) => ReferStatus::Contract,
            Error::Degenerate(_) => ReferStatus::Degenerate,
            Error::NonFinite(_) => ReferStatus::NonFinite,
            Error::Config(_) => ReferStatus::Config,
            Error::Parse { .. } => ReferStatus::Parse,
            Error::Io { .. } => ReferStatus::Io,
            Error::Json(_) | Error::Csv(_) => ReferStatus::Serialization,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(ReferStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ReferStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            ReferStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ReferStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(ReferStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn out_slice<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

unsafe fn model_ref<'a>(m: *const ReferModel) -> Result<&'a ModelParams, Fail> {
    m.as_ref().map(|m| &m.0).ok_or_else(|| null("model"))
}

unsafe fn config_arg(toml: *const c_char) -> Result<RunConfig, Fail> {
    if toml.is_null() {
        return Ok(RunConfig::default());
    }
    let text = str_arg(toml, "config")?;
    Ok(RunConfig::from_toml(text, Path::new("<config>"))?)
}

/// Copies `text` plus a NUL terminator into `buf` when it fits. Returns the
/// size needed, terminator included.
unsafe fn copy_out(text: &str, buf: *mut c_char, cap: usize) -> usize {
    let need = text.len() + 1;
    if !buf.is_null() && cap >= need {
        ptr::copy_nonoverlapping(text.as_ptr().cast::<c_char>(), buf, text.len());
        *buf.add(text.len()) = 0;
    }
    need
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn refer_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, empty after a success.
/// Writes at most `cap` bytes including the terminator and returns the size
/// the full message needs; nothing is written when `cap` is too small.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn refer_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| copy_out(&e.borrow(), buf, cap))
}

/// Initializes a model from the `[model]` section of a TOML config (null for
/// defaults) and a seed.
///
/// # Safety
/// `config_toml` must be null or a NUL-terminated string; `out` must be valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn refer_model_init(config_toml: *const c_char, seed: u64, out: *mut *mut ReferModel) -> ReferStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = config_arg(config_toml)?;
        let params = ModelParams::init(&cfg.model, seed)?;
        *out = Box::into_raw(Box::new(ReferModel(params)));
        Ok(())
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn refer_model_load(path: *const c_char, out: *mut *mut ReferModel) -> ReferStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let params = ModelParams::load(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(ReferModel(params)));
        Ok(())
    })
}

/// Writes a checkpoint file.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn refer_model_save(model: *const ReferModel, path: *const c_char) -> ReferStatus {
    guard(|| Ok(model_ref(model)?.save(str_arg(path, "path")?)?))
}

/// # Safety
/// `model` must be null or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn refer_model_free(model: *mut ReferModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of task classes, 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn refer_model_num_classes(model: *const ReferModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config.num_classes)
}

/// Extractor scores (logits), one per token, into `out[0..n]`.
///
/// # Safety
/// `tokens` and `out` must be valid for `n` elements.
#[no_mangle]
pub unsafe extern "C" fn refer_model_scores(
    model: *const ReferModel,
    tokens: *const u32,
    n: usize,
    out: *mut f64,
) -> ReferStatus {
    guard(|| {
        let params = model_ref(model)?;
        let scores = params.extractor_forward(slice_arg(tokens, n, "tokens")?)?;
        out_slice(out, n, "out")?.copy_from_slice(&scores);
        Ok(())
    })
}

/// Class probabilities on the full input into `out[0..cap]`; `cap` must be
/// at least the number of classes.
///
/// # Safety
/// `tokens` must be valid for `n` elements and `out` for `cap`.
#[no_mangle]
pub unsafe extern "C" fn refer_model_predict(
    model: *const ReferModel,
    tokens: *const u32,
    n: usize,
    out: *mut f64,
    cap: usize,
) -> ReferStatus {
    guard(|| {
        let params = model_ref(model)?;
        let m = params.config.num_classes;
        if cap < m {
            return Err(Fail(ReferStatus::BufferTooSmall, format!("need {m} slots, got {cap}")));
        }
        let logits = params.task_forward(slice_arg(tokens, n, "tokens")?, &vec![1.0; n])?;
        out_slice(out, m, "out")?.copy_from_slice(&softmax(&logits));
        Ok(())
    })
}

/// Top-`k_percent` selection of `scores` as 0/1 bytes into `out[0..n]`.
///
/// # Safety
/// `scores` and `out` must be valid for `n` elements.
#[no_mangle]
pub unsafe extern "C" fn refer_topk_mask(scores: *const f64, n: usize, k_percent: f64, out: *mut u8) -> ReferStatus {
    guard(|| {
        let k = KPercent::new(k_percent)?;
        let mask = topk_mask(slice_arg(scores, n, "scores")?, k)?;
        out_slice(out, n, "out")?.copy_from_slice(mask.bits());
        Ok(())
    })
}

/// Evaluates `model` on a JSONL dataset with the `[eval]` section of a TOML
/// config (null for defaults).
///
/// # Safety
/// `dataset_path` must be NUL-terminated, `config_toml` null or
/// NUL-terminated, and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn refer_evaluate(
    model: *const ReferModel,
    dataset_path: *const c_char,
    config_toml: *const c_char,
    out: *mut *mut ReferReport,
) -> ReferStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let params = model_ref(model)?;
        let cfg = config_arg(config_toml)?;
        let dataset = data::load_jsonl(str_arg(dataset_path, "dataset_path")?, Some(params.config.num_classes))?.dataset;
        let report = evaluate_model(params, &dataset, &cfg.eval, None)?;
        *out = Box::into_raw(Box::new(ReferReport(report)));
        Ok(())
    })
}

/// One metric of a report into `*out`; metrics the report lacks (plausibility
/// without gold) come back as NaN.
///
/// # Safety
/// `report` must come from this library; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn refer_report_metric(report: *const ReferReport, metric: ReferMetric, out: *mut f64) -> ReferStatus {
    guard(|| {
        let r = &report.as_ref().ok_or_else(|| null("report"))?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = match metric {
            ReferMetric::SuffAopc => Some(r.suff_aopc),
            ReferMetric::CompAopc => Some(r.comp_aopc),
            ReferMetric::Tf1 => r.tf1,
            ReferMetric::Auprc => r.auprc,
            ReferMetric::IouF1 => r.iou_f1,
            ReferMetric::Accuracy => r.accuracy,
            ReferMetric::MacroF1 => r.macro_f1,
        }
        .unwrap_or(f64::NAN);
        Ok(())
    })
}

/// Report as JSON. `*needed` receives the size including the terminator;
/// with a null `buf` or a short `cap` nothing is copied and the status is
/// `BUFFER_TOO_SMALL`.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes; `needed` must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn refer_report_json(
    report: *const ReferReport,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> ReferStatus {
    guard(|| {
        let r = &report.as_ref().ok_or_else(|| null("report"))?.0;
        if needed.is_null() {
            return Err(null("needed"));
        }
        let text = serde_json::to_string(r).map_err(|e| Fail::from(Error::from(e)))?;
        let need = copy_out(&text, buf, cap);
        *needed = need;
        if buf.is_null() || cap < need {
            return Err(Fail(ReferStatus::BufferTooSmall, format!("need {need} bytes, got {cap}")));
        }
        Ok(())
    })
}

/// # Safety
/// `report` must be null or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn refer_report_free(report: *mut ReferReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// NRG scores of `n` systems against their own column ranges. `tf1` and
/// `auprc` may be null, or hold NaN for systems without plausibility; those
/// get NaN in `out_pnrg`.
///
/// # Safety
/// Every input array must be null (where allowed) or valid for `n` elements,
/// and every output array valid for `n` elements.
#[no_mangle]
pub unsafe extern "C" fn refer_nrg_compose(
    n: usize,
    comp: *const f64,
    suff: *const f64,
    tf1: *const f64,
    auprc: *const f64,
    task: *const f64,
    out_fnrg: *mut f64,
    out_pnrg: *mut f64,
    out_tnrg: *mut f64,
    out_cnrg: *mut f64,
) -> ReferStatus {
    guard(|| {
        let comp = slice_arg(comp, n, "comp")?;
        let suff = slice_arg(suff, n, "suff")?;
        let task = slice_arg(task, n, "task")?;
        let optional = |p: *const f64, what| -> Result<Option<&[f64]>, Fail> {
            if p.is_null() {
                Ok(None)
            } else {
                Ok(Some(slice_arg(p, n, what)?))
            }
        };
        let tf1 = optional(tf1, "tf1")?;
        let auprc = optional(auprc, "auprc")?;
        let present = |v: Option<&[f64]>, i: usize| v.map(|v| v[i]).filter(|x| !x.is_nan());
        let rows: Vec<NrgRow> = (0..n)
            .map(|i| NrgRow {
                system: i.to_string(),
                comp: comp[i],
                suff: suff[i],
                tf1: present(tf1, i),
                auprc: present(auprc, i),
                task: task[i],
            })
            .collect();
        let scores = nrg_compose(&rows, None)?;
        let fnrg = out_slice(out_fnrg, n, "out_fnrg")?;
        let pnrg = out_slice(out_pnrg, n, "out_pnrg")?;
        let tnrg = out_slice(out_tnrg, n, "out_tnrg")?;
        let cnrg = out_slice(out_cnrg, n, "out_cnrg")?;
        for (i, s) in scores.iter().enumerate() {
            fnrg[i] = s.fnrg;
            pnrg[i] = s.pnrg.unwrap_or(f64::NAN);
            tnrg[i] = s.tnrg;
            cnrg[i] = s.cnrg;
        }
        Ok(())
    })
}
