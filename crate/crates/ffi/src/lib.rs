//! C interface to camtl.
//!
//! Every function returns a [`CamtlStatus`]. On failure the message is kept
//! per thread and can be copied out with [`camtl_last_error_message`].
//! Models are opaque handles owned by the caller and released with
//! [`camtl_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use camtl::analysis::parameter_report;
use camtl::harness::{self, checkpoint, ExperimentConfig, HarnessError, Split};
use camtl::conditioning::ConditioningError;
use camtl::model::{CaMtlModel, ModelError, Prediction};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamtlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    Io = 4,
    Checkpoint = 5,
    UnknownTask = 6,
    Model = 7,
    Training = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// A model together with the experiment config that describes it.
pub struct CamtlModel {
    config: ExperimentConfig,
    model: CaMtlModel,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Failure(CamtlStatus, String);

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let status = match &e {
            HarnessError::Config(_) | HarnessError::Json(_) | HarnessError::Tsv { .. } => CamtlStatus::InvalidConfig,
            HarnessError::Io { .. } => CamtlStatus::Io,
            HarnessError::Checkpoint(_) => CamtlStatus::Checkpoint,
            HarnessError::UnknownTask { .. } => CamtlStatus::UnknownTask,
            HarnessError::Model(m) => return Failure::from(m.clone()),
            HarnessError::Tensor(_) | HarnessError::Analysis(_) => CamtlStatus::Model,
            HarnessError::NonFiniteLoss { .. } | HarnessError::Sampler(_) => CamtlStatus::Training,
        };
        Failure(status, e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => Failure(CamtlStatus::InvalidConfig, e.to_string()),
            ModelError::HeadMismatch { .. } | ModelError::Conditioning(ConditioningError::UnknownTask { .. }) => {
                Failure(CamtlStatus::UnknownTask, e.to_string())
            }
            _ => Failure(CamtlStatus::Model, e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> CamtlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CamtlStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CamtlStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(CamtlStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CamtlStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const CamtlModel) -> Result<&'a CamtlModel, Failure> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn emit(handle: CamtlModel, out: *mut *mut CamtlModel) -> Outcome {
    *out = Box::into_raw(Box::new(handle));
    Ok(())
}

/// Copies `s` plus a NUL terminator into `buf`. `needed` receives the byte
/// count including the terminator, also when the buffer is too small.
unsafe fn copy_out(s: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> Outcome {
    let n = s.len() + 1;
    if !needed.is_null() {
        *needed = n;
    }
    if buf.is_null() || len < n {
        return Err(Failure(
            CamtlStatus::BufferTooSmall,
            format!("buffer holds {len} bytes, {n} needed"),
        ));
    }
    ptr::copy_nonoverlapping(s.as_ptr(), buf.cast::<u8>(), s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// Copies the calling thread's last error message into `buf` and returns the
/// size needed including the terminator. Passing a null `buf` only queries
/// the size.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn camtl_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let n = e.len() + 1;
        if !buf.is_null() && len > 0 {
            let k = e.len().min(len - 1);
            ptr::copy_nonoverlapping(e.as_ptr(), buf.cast::<u8>(), k);
            *buf.add(k) = 0;
        }
        n
    })
}

/// Builds an untrained model from a JSON experiment config.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn camtl_model_new(config_json: *const c_char, out: *mut *mut CamtlModel) -> CamtlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config = ExperimentConfig::from_json(text(config_json, "config_json")?)?;
        let model = CaMtlModel::new(config.model.clone(), &config.task_kinds(), config.seed)?;
        emit(CamtlModel { config, model }, out)
    })
}

/// Runs the experiment described by `config_json` and returns the trained
/// model. A non-null `out_dir` overrides the config's output directory.
///
/// # Safety
/// String arguments must be NUL-terminated or, for `out_dir`, null; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn camtl_train(
    config_json: *const c_char,
    out_dir: *const c_char,
    out: *mut *mut CamtlModel,
) -> CamtlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut config = ExperimentConfig::from_json(text(config_json, "config_json")?)?;
        if !out_dir.is_null() {
            config.out_dir = Some(text(out_dir, "out_dir")?.into());
        }
        let run = harness::train(&config)?;
        emit(CamtlModel { config, model: run.model }, out)
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn camtl_model_load(path: *const c_char, out: *mut *mut CamtlModel) -> CamtlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (config, model) = checkpoint::load(Path::new(text(path, "path")?))?;
        emit(CamtlModel { config, model }, out)
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn camtl_model_save(model: *const CamtlModel, path: *const c_char) -> CamtlStatus {
    guard(|| {
        let m = model_ref(model)?;
        checkpoint::save(Path::new(text(path, "path")?), &m.model, &m.config)?;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn camtl_model_free(model: *mut CamtlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of registered tasks.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn camtl_model_task_count(model: *const CamtlModel, out: *mut usize) -> CamtlStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.model.heads().len();
        Ok(())
    })
}

/// Values produced per prediction: class count, or 1 for regression.
///
/// # Safety
/// `model` must come from this library; `task` must be NUL-terminated;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn camtl_model_output_dim(model: *const CamtlModel, task: *const c_char, out: *mut usize) -> CamtlStatus {
    guard(|| {
        let m = model_ref(model)?;
        let task = text(task, "task")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.model.head(task)?.kind().output_dim();
        Ok(())
    })
}

/// Predicts one token sequence. Classification writes class probabilities,
/// regression a single value in the task's range. `written` receives the
/// number of values.
///
/// # Safety
/// `tokens` must be valid for `n_tokens` reads and `out` for `out_len`
/// writes; `written` must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn camtl_model_predict(
    model: *const CamtlModel,
    task: *const c_char,
    tokens: *const u32,
    n_tokens: usize,
    out: *mut f64,
    out_len: usize,
    written: *mut usize,
) -> CamtlStatus {
    guard(|| {
        let m = model_ref(model)?;
        let task = text(task, "task")?;
        if tokens.is_null() && n_tokens > 0 {
            return Err(null("tokens"));
        }
        let toks = if n_tokens == 0 { &[][..] } else { std::slice::from_raw_parts(tokens, n_tokens) };
        let values = match m.model.predict(task, toks)? {
            Prediction::Probs(p) => p,
            Prediction::Value(v) => vec![v],
        };
        if !written.is_null() {
            *written = values.len();
        }
        if out.is_null() || out_len < values.len() {
            return Err(Failure(
                CamtlStatus::BufferTooSmall,
                format!("output holds {out_len} values, {} needed", values.len()),
            ));
        }
        ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
        Ok(())
    })
}

/// Dev-split metrics of every configured task as a JSON array.
///
/// # Safety
/// `model` must come from this library; `buf` must be null or valid for
/// `len` bytes; `needed` must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn camtl_model_evaluate_json(
    model: *const CamtlModel,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> CamtlStatus {
    guard(|| {
        let m = model_ref(model)?;
        let tasks = harness::load_tasks(&m.config)?;
        let metrics = harness::evaluate(&m.model, &tasks, Split::Dev)?;
        copy_out(&serde_json::to_string(&metrics).expect("metrics serialize"), buf, len, needed)
    })
}

/// Parameter accounting as a JSON object.
///
/// # Safety
/// As for [`camtl_model_evaluate_json`].
#[no_mangle]
pub unsafe extern "C" fn camtl_model_parameter_report_json(
    model: *const CamtlModel,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> CamtlStatus {
    guard(|| {
        let m = model_ref(model)?;
        let report = parameter_report(&m.model);
        copy_out(&serde_json::to_string(&report).expect("report serializes"), buf, len, needed)
    })
}
