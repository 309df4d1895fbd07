//! C ABI over the `fedduap` simulator.
//!
//! Every fallible call returns an [`FdStatus`]; on failure a message is kept
//! in thread-local storage and can be read with [`fd_last_error`]. Handles
//! are opaque and must be released with their `_free` function. Strings
//! handed out by the library are released with [`fd_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use fedduap::datagen::{kl_divergence, noniid_degree};
use fedduap::fedcore::{effective_step, AccuracyScale, StepInputs};
use fedduap::harness::{load_config, parse_config, run_experiment, ExperimentConfig, RunOptions};
use fedduap::nnkernel::{predict, Model};
use fedduap::pruner::{aggregate_rate, flops_count, global_threshold};
use fedduap::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Numeric = 4,
    Config = 5,
    Io = 6,
    Parse = 7,
    Partition = 8,
    HessianCap = 9,
    Empty = 10,
    Panic = 99,
}

impl From<&Error> for FdStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape { .. } | Error::Length { .. } => FdStatus::Shape,
            Error::InvalidArgument(_) => FdStatus::InvalidArgument,
            Error::NotSymmetric(_) | Error::NonFinite(_) => FdStatus::Numeric,
            Error::HessianCap { .. } => FdStatus::HessianCap,
            Error::Empty(_) => FdStatus::Empty,
            Error::Partition(_) => FdStatus::Partition,
            Error::Config { .. } => FdStatus::Config,
            Error::Io { .. } => FdStatus::Io,
            Error::Parse(_) => FdStatus::Parse,
        }
    }
}

/// Opaque model handle.
pub struct FdModel(Model);

/// Opaque experiment configuration handle.
pub struct FdConfig(ExperimentConfig);

/// Inputs of the server step-size rule, mirrored for C.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct FdStepInputs {
    pub accuracy: f64,
    pub div_selected: f64,
    pub div_server: f64,
    pub n_server: usize,
    pub n_selected: usize,
    pub server_scale: f64,
    pub decay: f64,
    pub round: usize,
    pub tau: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

enum Fail {
    Null(&'static str),
    Invalid(String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FdStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FdStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer passed for `{what}`"));
            FdStatus::NullPointer
        }
        Ok(Err(Fail::Invalid(msg))) => {
            set_error(msg);
            FdStatus::InvalidArgument
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            FdStatus::from(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            FdStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn string<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Invalid(format!("`{what}` is not valid UTF-8")))
}

fn into_c_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Fail::Invalid("string contains an interior NUL".into()))
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn fd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and must not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a model document.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fd_model_from_json(json: *const c_char, out: *mut *mut FdModel) -> FdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let model = Model::from_json(string(json, "json")?)?;
        *out = Box::into_raw(Box::new(FdModel(model)));
        Ok(())
    })
}

/// Loads a model document from a file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fd_model_load(path: *const c_char, out: *mut *mut FdModel) -> FdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = Path::new(string(path, "path")?);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        *out = Box::into_raw(Box::new(FdModel(Model::from_json(&text)?)));
        Ok(())
    })
}

/// Serializes a model; release the result with [`fd_string_free`].
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fd_model_to_json(model: *const FdModel, out: *mut *mut c_char) -> FdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let model = non_null(model, "model")?;
        *out = into_c_string(model.0.to_json()?)?;
        Ok(())
    })
}

/// Releases a model handle. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and must not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fd_model_free(model: *mut FdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable parameters.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fd_model_param_count(model: *const FdModel, out: *mut usize) -> FdStatus {
    guard(|| {
        *out_ptr(out, "out")? = non_null(model, "model")?.0.param_count();
        Ok(())
    })
}

/// Flattened input length (`C * H * W`).
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fd_model_input_len(model: *const FdModel, out: *mut usize) -> FdStatus {
    guard(|| {
        *out_ptr(out, "out")? = non_null(model, "model")?.0.input_len();
        Ok(())
    })
}

/// Number of logits.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fd_model_output_len(model: *const FdModel, out: *mut usize) -> FdStatus {
    guard(|| {
        *out_ptr(out, "out")? = non_null(model, "model")?.0.output_len();
        Ok(())
    })
}

/// Forward cost of one sample in millions of FLOPs.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fd_model_mflops(model: *const FdModel, out: *mut f64) -> FdStatus {
    guard(|| {
        *out_ptr(out, "out")? = flops_count(&non_null(model, "model")?.0);
        Ok(())
    })
}

/// Logits for one sample. Lengths must match the model exactly.
///
/// # Safety
/// `input` must hold `input_len` doubles and `logits` must have room for
/// `logits_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fd_model_predict(
    model: *const FdModel,
    input: *const f64,
    input_len: usize,
    logits: *mut f64,
    logits_len: usize,
) -> FdStatus {
    guard(|| {
        let model = &non_null(model, "model")?.0;
        if input_len != model.input_len() {
            return Err(Error::Length {
                expected: model.input_len(),
                actual: input_len,
            }
            .into());
        }
        if logits_len != model.output_len() {
            return Err(Error::Length {
                expected: model.output_len(),
                actual: logits_len,
            }
            .into());
        }
        let input = slice(input, input_len, "input")?;
        if logits.is_null() {
            return Err(Fail::Null("logits"));
        }
        let y = predict(model, input);
        std::slice::from_raw_parts_mut(logits, logits_len).copy_from_slice(&y);
        Ok(())
    })
}

/// `KL(p || q)` in nats; `+inf` when `q` misses support of `p`.
///
/// # Safety
/// `p` and `q` must each hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fd_kl_divergence(p: *const f64, q: *const f64, len: usize, out: *mut f64) -> FdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = kl_divergence(slice(p, len, "p")?, slice(q, len, "q")?)?;
        Ok(())
    })
}

/// Jensen-Shannon non-IID degree of `p_k` against `p_bar`, in `[0, ln 2]`.
///
/// # Safety
/// `p_k` and `p_bar` must each hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fd_noniid_degree(
    p_k: *const f64,
    p_bar: *const f64,
    len: usize,
    out: *mut f64,
) -> FdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = noniid_degree(slice(p_k, len, "p_k")?, slice(p_bar, len, "p_bar")?)?;
        Ok(())
    })
}

/// Effective server step count with the default `1 - acc` scale.
///
/// # Safety
/// `inputs` must point to a valid struct; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fd_effective_step(inputs: *const FdStepInputs, out: *mut f64) -> FdStatus {
    guard(|| {
        let i = *non_null(inputs, "inputs")?;
        let out = out_ptr(out, "out")?;
        let inputs = StepInputs {
            accuracy: i.accuracy,
            div_selected: i.div_selected,
            div_server: i.div_server,
            n_server: i.n_server,
            n_selected: i.n_selected,
            server_scale: i.server_scale,
            decay: i.decay,
            round: i.round,
            tau: i.tau,
        };
        *out = effective_step(&inputs, &AccuracyScale::OneMinusAcc);
        Ok(())
    })
}

/// Divergence-weighted merge of per-party pruning rates.
///
/// # Safety
/// `rates`, `n` and `divergences` must each hold `len` elements; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn fd_aggregate_rate(
    rates: *const f64,
    n: *const usize,
    divergences: *const f64,
    len: usize,
    epsilon: f64,
    out: *mut f64,
) -> FdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = aggregate_rate(
            slice(rates, len, "rates")?,
            slice(n, len, "n")?,
            slice(divergences, len, "divergences")?,
            epsilon,
        )?;
        Ok(())
    })
}

/// Magnitude threshold below which a `p_star` share of values falls.
///
/// # Safety
/// `values` must hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fd_global_threshold(
    values: *const f64,
    len: usize,
    p_star: f64,
    out: *mut f64,
) -> FdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = global_threshold(slice(values, len, "values")?, p_star)?;
        Ok(())
    })
}

/// Parses and validates a TOML experiment configuration.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fd_config_parse(text: *const c_char, out: *mut *mut FdConfig) -> FdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg = parse_config(string(text, "text")?)?;
        *out = Box::into_raw(Box::new(FdConfig(cfg)));
        Ok(())
    })
}

/// Loads and validates a TOML experiment configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fd_config_load(path: *const c_char, out: *mut *mut FdConfig) -> FdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg = load_config(Path::new(string(path, "path")?))?;
        *out = Box::into_raw(Box::new(FdConfig(cfg)));
        Ok(())
    })
}

/// Overrides the experiment seed.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fd_config_set_seed(config: *mut FdConfig, seed: u64) -> FdStatus {
    guard(|| {
        out_ptr(config, "config")?.0.seed = seed;
        Ok(())
    })
}

/// Effective configuration with defaults filled in, as TOML.
///
/// # Safety
/// `config` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fd_config_to_toml(config: *const FdConfig, out: *mut *mut c_char) -> FdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = into_c_string(non_null(config, "config")?.0.to_toml()?)?;
        Ok(())
    })
}

/// Releases a configuration handle. NULL is ignored.
///
/// # Safety
/// `config` must come from this library and must not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fd_config_free(config: *mut FdConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs a full experiment and returns its summary as JSON. `out_dir` may be
/// NULL to skip writing artifacts; `workers == 0` uses every core.
///
/// # Safety
/// `config` must be a live handle; `out_dir` is NULL or a NUL-terminated
/// string; `summary_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fd_run_experiment(
    config: *const FdConfig,
    out_dir: *const c_char,
    workers: usize,
    summary_json: *mut *mut c_char,
) -> FdStatus {
    guard(|| {
        let out = out_ptr(summary_json, "summary_json")?;
        let cfg = &non_null(config, "config")?.0;
        let dir = if out_dir.is_null() {
            None
        } else {
            Some(PathBuf::from(string(out_dir, "out_dir")?))
        };
        let result = run_experiment(cfg, &RunOptions { workers, out_dir: dir })?;
        let json = serde_json::to_string(&result.summary).map_err(Error::from)?;
        *out = into_c_string(json)?;
        Ok(())
    })
}
