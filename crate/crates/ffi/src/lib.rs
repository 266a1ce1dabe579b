//! C ABI for the backward doubly stochastic control library.
//!
//! The surface is handle-based: configurations and finished runs are
//! opaque pointers created and destroyed here; every fallible call returns
//! a status code and stores a message retrievable with
//! [`bdsc_last_error_message`]. Strings returned as `char*` are owned by
//! the caller and must be released with [`bdsc_string_free`].

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use libc::c_char;

use bdsc::config::{ExperimentConfig, Pipeline};
use bdsc::csvio::render_summary;
use bdsc::runner::RunOutcome;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BdscStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    RuntimeError = 4,
    IndexOutOfRange = 5,
}

/// Opaque experiment configuration.
pub struct BdscConfig {
    inner: ExperimentConfig,
}

/// Opaque finished run.
pub struct BdscRun {
    inner: RunOutcome,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<Vec<u8>>) {
    let c = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, BdscStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(BdscStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        BdscStatus::InvalidUtf8
    })
}

/// Message describing the most recent failure on this thread, or null when
/// the last call succeeded. The caller owns the returned string.
#[no_mangle]
pub extern "C" fn bdsc_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| match &*e.borrow() {
        Some(msg) => msg.clone().into_raw(),
        None => ptr::null_mut(),
    })
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must be a pointer previously returned by a `bdsc_*` call and not
/// yet freed.
#[no_mangle]
pub unsafe extern "C" fn bdsc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn bdsc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Build a minimal configuration for `pipeline` and `model` with explicit
/// seeds. On success writes a handle into `out`.
///
/// # Safety
/// `pipeline` and `model` must be valid NUL-terminated strings and `out` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bdsc_config_new(
    pipeline: *const c_char,
    model: *const c_char,
    master_seed: u64,
    b_seed: u64,
    out: *mut *mut BdscConfig,
) -> BdscStatus {
    clear_error();
    if out.is_null() {
        set_error("null output handle");
        return BdscStatus::NullPointer;
    }
    let pipeline = match cstr(pipeline) {
        Ok(s) => s,
        Err(st) => return st,
    };
    let model = match cstr(model) {
        Ok(s) => s,
        Err(st) => return st,
    };
    let pipeline = match Pipeline::parse(pipeline) {
        Ok(p) => p,
        Err(e) => {
            set_error(e.to_string());
            return BdscStatus::InvalidArgument;
        }
    };
    let config = ExperimentConfig::minimal(pipeline, model, master_seed, b_seed);
    *out = Box::into_raw(Box::new(BdscConfig { inner: config }));
    BdscStatus::Ok
}

/// Parse a configuration from a TOML file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bdsc_config_from_file(
    path: *const c_char,
    out: *mut *mut BdscConfig,
) -> BdscStatus {
    clear_error();
    if out.is_null() {
        set_error("null output handle");
        return BdscStatus::NullPointer;
    }
    let path = match cstr(path) {
        Ok(s) => s,
        Err(st) => return st,
    };
    match ExperimentConfig::from_file(Path::new(path)) {
        Ok(config) => {
            *out = Box::into_raw(Box::new(BdscConfig { inner: config }));
            BdscStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            BdscStatus::InvalidArgument
        }
    }
}

/// Parse a configuration from TOML text.
///
/// # Safety
/// `text` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bdsc_config_from_toml(
    text: *const c_char,
    out: *mut *mut BdscConfig,
) -> BdscStatus {
    clear_error();
    if out.is_null() {
        set_error("null output handle");
        return BdscStatus::NullPointer;
    }
    let text = match cstr(text) {
        Ok(s) => s,
        Err(st) => return st,
    };
    match ExperimentConfig::from_toml_str(text) {
        Ok(config) => {
            *out = Box::into_raw(Box::new(BdscConfig { inner: config }));
            BdscStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            BdscStatus::InvalidArgument
        }
    }
}

/// Apply a dotted-key override (`grid.n_steps=100`, `model.sigma=0.4`, ...).
///
/// # Safety
/// `config` must be a live handle; `key` and `value` valid strings.
#[no_mangle]
pub unsafe extern "C" fn bdsc_config_override(
    config: *mut BdscConfig,
    key: *const c_char,
    value: *const c_char,
) -> BdscStatus {
    clear_error();
    if config.is_null() {
        set_error("null config handle");
        return BdscStatus::NullPointer;
    }
    let key = match cstr(key) {
        Ok(s) => s,
        Err(st) => return st,
    };
    let value = match cstr(value) {
        Ok(s) => s,
        Err(st) => return st,
    };
    match (*config).inner.apply_override(key, value) {
        Ok(()) => BdscStatus::Ok,
        Err(e) => {
            set_error(e.to_string());
            BdscStatus::InvalidArgument
        }
    }
}

/// Set the artifact output directory.
///
/// # Safety
/// `config` must be a live handle and `dir` a valid string.
#[no_mangle]
pub unsafe extern "C" fn bdsc_config_set_out_dir(
    config: *mut BdscConfig,
    dir: *const c_char,
) -> BdscStatus {
    clear_error();
    if config.is_null() {
        set_error("null config handle");
        return BdscStatus::NullPointer;
    }
    let dir = match cstr(dir) {
        Ok(s) => s,
        Err(st) => return st,
    };
    (*config).inner.out_dir = dir.into();
    BdscStatus::Ok
}

/// Release a configuration handle.
///
/// # Safety
/// `config` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn bdsc_config_free(config: *mut BdscConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Execute the configured pipeline; artifacts land in the configured
/// output directory. On success writes a run handle into `out`.
///
/// # Safety
/// `config` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bdsc_run(
    config: *const BdscConfig,
    out: *mut *mut BdscRun,
) -> BdscStatus {
    clear_error();
    if config.is_null() || out.is_null() {
        set_error("null handle");
        return BdscStatus::NullPointer;
    }
    match bdsc::runner::run(&(*config).inner) {
        Ok(outcome) => {
            *out = Box::into_raw(Box::new(BdscRun { inner: outcome }));
            BdscStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            BdscStatus::RuntimeError
        }
    }
}

/// 1 when every check of the run passed, 0 otherwise.
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bdsc_run_all_passed(run: *const BdscRun) -> i32 {
    if run.is_null() {
        return 0;
    }
    i32::from((*run).inner.all_passed)
}

/// Number of check records in the run.
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bdsc_run_check_count(run: *const BdscRun) -> usize {
    if run.is_null() {
        return 0;
    }
    (*run).inner.records.len()
}

/// Name of check `index` as `suite/criterion`; caller frees the string.
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bdsc_run_check_name(run: *const BdscRun, index: usize) -> *mut c_char {
    if run.is_null() {
        return ptr::null_mut();
    }
    #[allow(clippy::needless_borrow)]
    match (&(*run).inner.records).get(index) {
        Some(r) => CString::new(format!("{}/{}", r.suite, r.criterion))
            .map(CString::into_raw)
            .unwrap_or(ptr::null_mut()),
        None => ptr::null_mut(),
    }
}

/// Value, tolerance, and pass flag of check `index`.
///
/// # Safety
/// `run` must be a live handle; non-null outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn bdsc_run_check_result(
    run: *const BdscRun,
    index: usize,
    value: *mut f64,
    tolerance: *mut f64,
    pass: *mut i32,
) -> BdscStatus {
    clear_error();
    if run.is_null() {
        set_error("null run handle");
        return BdscStatus::NullPointer;
    }
    #[allow(clippy::needless_borrow)]
    match (&(*run).inner.records).get(index) {
        Some(r) => {
            if !value.is_null() {
                *value = r.value;
            }
            if !tolerance.is_null() {
                *tolerance = r.tolerance;
            }
            if !pass.is_null() {
                *pass = i32::from(r.pass);
            }
            BdscStatus::Ok
        }
        None => {
            set_error(format!("check index {index} out of range"));
            BdscStatus::IndexOutOfRange
        }
    }
}

/// The run's human-readable summary table; caller frees the string.
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bdsc_run_summary(run: *const BdscRun) -> *mut c_char {
    if run.is_null() {
        return ptr::null_mut();
    }
    CString::new(render_summary(&(*run).inner.records))
        .map(CString::into_raw)
        .unwrap_or(ptr::null_mut())
}

/// Release a run handle.
///
/// # Safety
/// `run` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn bdsc_run_free(run: *mut BdscRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    fn c(s: &str) -> CString {
        CString::new(s).unwrap()
    }

    #[test]
    fn config_round_trip_and_run() {
        unsafe {
            let mut cfg: *mut BdscConfig = ptr::null_mut();
            let st = bdsc_config_new(
                c("simulate").as_ptr(),
                c("zero").as_ptr(),
                1,
                2,
                &mut cfg,
            );
            assert_eq!(st, BdscStatus::Ok);
            assert_eq!(
                bdsc_config_override(cfg, c("paths.m_paths").as_ptr(), c("200").as_ptr()),
                BdscStatus::Ok
            );
            assert_eq!(
                bdsc_config_override(cfg, c("grid.n_steps").as_ptr(), c("10").as_ptr()),
                BdscStatus::Ok
            );
            let tmp = std::env::temp_dir().join("bdsc-ffi-test");
            let dir = c(tmp.to_str().unwrap());
            assert_eq!(bdsc_config_set_out_dir(cfg, dir.as_ptr()), BdscStatus::Ok);

            let mut run: *mut BdscRun = ptr::null_mut();
            assert_eq!(bdsc_run(cfg, &mut run), BdscStatus::Ok);
            assert_eq!(bdsc_run_all_passed(run), 1);
            assert!(bdsc_run_check_count(run) > 0);

            let name = bdsc_run_check_name(run, 0);
            assert!(!name.is_null());
            let name_str = CStr::from_ptr(name).to_str().unwrap().to_string();
            assert!(name_str.contains('/'), "{name_str}");
            bdsc_string_free(name);

            let mut value = 0.0;
            let mut tol = 0.0;
            let mut pass = 0;
            assert_eq!(
                bdsc_run_check_result(run, 0, &mut value, &mut tol, &mut pass),
                BdscStatus::Ok
            );
            assert_eq!(pass, 1);

            let summary = bdsc_run_summary(run);
            assert!(!summary.is_null());
            bdsc_string_free(summary);

            bdsc_run_free(run);
            bdsc_config_free(cfg);
            let _ = std::fs::remove_dir_all(&tmp);
        }
    }

    #[test]
    fn errors_are_reported() {
        unsafe {
            let mut cfg: *mut BdscConfig = ptr::null_mut();
            let st = bdsc_config_new(
                c("explode").as_ptr(),
                c("zero").as_ptr(),
                1,
                2,
                &mut cfg,
            );
            assert_eq!(st, BdscStatus::InvalidArgument);
            let msg = bdsc_last_error_message();
            assert!(!msg.is_null());
            let text = CStr::from_ptr(msg).to_str().unwrap().to_string();
            assert!(text.contains("verify-all"), "{text}");
            bdsc_string_free(msg);

            let st = bdsc_config_new(
                c("simulate").as_ptr(),
                c("not-a-model").as_ptr(),
                1,
                2,
                &mut cfg,
            );
            // model names are resolved at run time; config creation succeeds
            assert_eq!(st, BdscStatus::Ok);
            let mut run: *mut BdscRun = ptr::null_mut();
            assert_eq!(bdsc_run(cfg, &mut run), BdscStatus::RuntimeError);
            let msg = bdsc_last_error_message();
            assert!(!msg.is_null());
            bdsc_string_free(msg);
            bdsc_config_free(cfg);
        }
    }

    #[test]
    fn null_safety() {
        unsafe {
            assert_eq!(bdsc_run_all_passed(ptr::null()), 0);
            assert_eq!(bdsc_run_check_count(ptr::null()), 0);
            assert!(bdsc_run_summary(ptr::null()).is_null());
            bdsc_string_free(ptr::null_mut());
            bdsc_config_free(ptr::null_mut());
            bdsc_run_free(ptr::null_mut());
            let mut cfg: *mut BdscConfig = ptr::null_mut();
            assert_eq!(
                bdsc_config_new(ptr::null(), ptr::null(), 0, 0, &mut cfg),
                BdscStatus::NullPointer
            );
        }
    }
}
