//! C ABI for the schedule tuner: opaque handles over scenarios and finished
//! runs, status codes, and a thread-local last-error message. The header is
//! generated into `include/sgdtune.h` at build time.
//!
//! Ownership rules: every `*_new`/`sgdtune_optimize` out-pointer is owned by
//! the caller and must be released with the matching `*_free`; strings
//! returned by this library are released with `sgdtune_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use sgdtune::domain::{ClusterSpec, WorkloadSpec};
use sgdtune::optimizer::{self, Method, OptRun};
use sgdtune::simulator::make_setting;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgdtuneStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    RuntimeError = 3,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn fail(status: SgdtuneStatus, message: impl Into<String>) -> SgdtuneStatus {
    set_error(message.into());
    status
}

/// A cluster plus workload ready to be tuned.
pub struct SgdtuneScenario {
    cluster: ClusterSpec,
    workload: WorkloadSpec,
}

/// A finished optimization trajectory.
pub struct SgdtuneRun {
    run: OptRun,
}

unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, SgdtuneStatus> {
    if ptr.is_null() {
        return Err(fail(SgdtuneStatus::NullPointer, "null string argument"));
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| {
        fail(
            SgdtuneStatus::InvalidArgument,
            "string argument is not valid UTF-8",
        )
    })
}

/// Builds a scenario from a built-in setting (`'A'`, `'B'` or `'C'`), a
/// built-in workload name and a batch size.
///
/// # Safety
/// `workload` must be a NUL-terminated string and `out` a valid pointer; the
/// returned scenario must be released with [`sgdtune_scenario_free`].
#[no_mangle]
pub unsafe extern "C" fn sgdtune_scenario_from_setting(
    setting: c_char,
    workload: *const c_char,
    batch: u64,
    out: *mut *mut SgdtuneScenario,
) -> SgdtuneStatus {
    if out.is_null() {
        return fail(SgdtuneStatus::NullPointer, "null out pointer");
    }
    let workload = match unsafe { read_str(workload) } {
        Ok(s) => s,
        Err(status) => return status,
    };
    match make_setting(setting as u8 as char, workload, batch) {
        Ok((cluster, workload)) => {
            let scenario = Box::new(SgdtuneScenario { cluster, workload });
            unsafe { *out = Box::into_raw(scenario) };
            SgdtuneStatus::Ok
        }
        Err(e) => fail(SgdtuneStatus::InvalidArgument, e.to_string()),
    }
}

/// # Safety
/// `scenario` must come from [`sgdtune_scenario_from_setting`] and not have
/// been freed already. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn sgdtune_scenario_free(scenario: *mut SgdtuneScenario) {
    if !scenario.is_null() {
        drop(unsafe { Box::from_raw(scenario) });
    }
}

/// Runs one optimizer (`"bespoke"`, `"generic_gp"`, `"random"`,
/// `"uniform_devices"` or `"uniform_gpus"`) for `budget` evaluations.
///
/// # Safety
/// `scenario` must be a live scenario handle, `method` a NUL-terminated
/// string, `out` a valid pointer; the returned run must be released with
/// [`sgdtune_run_free`].
#[no_mangle]
pub unsafe extern "C" fn sgdtune_optimize(
    scenario: *const SgdtuneScenario,
    method: *const c_char,
    budget: u32,
    seed: u64,
    out: *mut *mut SgdtuneRun,
) -> SgdtuneStatus {
    if scenario.is_null() || out.is_null() {
        return fail(SgdtuneStatus::NullPointer, "null scenario or out pointer");
    }
    let method = match unsafe { read_str(method) } {
        Ok(s) => s,
        Err(status) => return status,
    };
    let method: Method = match method.parse() {
        Ok(m) => m,
        Err(e) => return fail(SgdtuneStatus::InvalidArgument, e),
    };
    let scenario = unsafe { &*scenario };
    let result = catch_unwind(AssertUnwindSafe(|| {
        optimizer::run_method(
            method,
            &scenario.cluster,
            &scenario.workload,
            budget as usize,
            seed,
        )
    }));
    match result {
        Ok(Ok(run)) => {
            unsafe { *out = Box::into_raw(Box::new(SgdtuneRun { run })) };
            SgdtuneStatus::Ok
        }
        Ok(Err(e)) => fail(SgdtuneStatus::InvalidArgument, e.to_string()),
        Err(_) => fail(SgdtuneStatus::RuntimeError, "optimizer panicked"),
    }
}

/// # Safety
/// `run` must come from [`sgdtune_optimize`] and not have been freed already.
/// Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn sgdtune_run_free(run: *mut SgdtuneRun) {
    if !run.is_null() {
        drop(unsafe { Box::from_raw(run) });
    }
}

/// Number of evaluated configurations in the run; 0 for null.
///
/// # Safety
/// `run` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn sgdtune_run_len(run: *const SgdtuneRun) -> usize {
    if run.is_null() {
        return 0;
    }
    unsafe { &*run }.run.trajectory.len()
}

/// Best (lowest) measured iteration time of the run, in seconds. Returns
/// infinity for null or empty runs.
///
/// # Safety
/// `run` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn sgdtune_run_best(run: *const SgdtuneRun) -> f64 {
    if run.is_null() {
        return f64::INFINITY;
    }
    unsafe { &*run }.run.best()
}

/// Measured objective of the `index`-th evaluation, in seconds.
///
/// # Safety
/// `run` must be a live run handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sgdtune_run_objective(
    run: *const SgdtuneRun,
    index: usize,
    out: *mut f64,
) -> SgdtuneStatus {
    unsafe { trajectory_field(run, index, out, |p| p.measurement.objective) }
}

/// Best objective seen up to and including the `index`-th evaluation.
///
/// # Safety
/// `run` must be a live run handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sgdtune_run_best_so_far(
    run: *const SgdtuneRun,
    index: usize,
    out: *mut f64,
) -> SgdtuneStatus {
    unsafe { trajectory_field(run, index, out, |p| p.best_so_far) }
}

unsafe fn trajectory_field(
    run: *const SgdtuneRun,
    index: usize,
    out: *mut f64,
    field: impl Fn(&sgdtune::optimizer::TrajectoryPoint) -> f64,
) -> SgdtuneStatus {
    if run.is_null() || out.is_null() {
        return fail(SgdtuneStatus::NullPointer, "null run or out pointer");
    }
    let run = unsafe { &*run };
    match run.run.trajectory.get(index) {
        Some(p) => {
            unsafe { *out = field(p) };
            SgdtuneStatus::Ok
        }
        None => fail(
            SgdtuneStatus::InvalidArgument,
            format!(
                "index {index} out of range ({} evaluations)",
                run.run.trajectory.len()
            ),
        ),
    }
}

/// Compact textual form of the `index`-th configuration, or null when the
/// index is out of range. Release with [`sgdtune_string_free`].
///
/// # Safety
/// `run` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn sgdtune_run_config_digest(
    run: *const SgdtuneRun,
    index: usize,
) -> *mut c_char {
    if run.is_null() {
        return std::ptr::null_mut();
    }
    let run = unsafe { &*run };
    match run.run.trajectory.get(index) {
        Some(p) => match CString::new(p.config.digest()) {
            Ok(s) => s.into_raw(),
            Err(_) => std::ptr::null_mut(),
        },
        None => std::ptr::null_mut(),
    }
}

/// Message of the most recent error on this thread, or null. Release with
/// [`sgdtune_string_free`].
#[no_mangle]
pub extern "C" fn sgdtune_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|slot| match &*slot.borrow() {
        Some(msg) => msg.clone().into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// # Safety
/// `s` must be a string returned by this library and not yet freed. Null is
/// a no-op.
#[no_mangle]
pub unsafe extern "C" fn sgdtune_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}
