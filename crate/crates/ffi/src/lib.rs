//! C ABI for the federated-learning simulator.
//!
//! The surface is handle-based: parse a JSON experiment config into an
//! opaque [`FedmrExperiment`], run it, then read the round reports (JSON
//! lines) and the summary (JSON) as C strings. All returned strings are
//! owned by the caller and must be released with [`fedmr_string_free`];
//! handles are released with [`fedmr_experiment_free`]. Errors are reported
//! as status codes, with the last message available per thread through
//! [`fedmr_last_error_message`].

use fedmr_core::config::{self, RunPlan};
use fedmr_core::error::Error;
use fedmr_core::federation::{self, ExperimentSummary, RoundReport};
use libc::c_char;
use std::cell::RefCell;
use std::ffi::{CStr, CString};

/// Status codes returned by the API.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedmrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidConfig = 2,
    RunFailed = 3,
    NotRun = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let cstring = CString::new(message).unwrap_or_else(|_| CString::new("invalid error message").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(cstring));
}

fn status_for(err: &Error) -> FedmrStatus {
    match err {
        Error::Config(_) | Error::Parse(_) | Error::Format(_) => FedmrStatus::InvalidConfig,
        _ => FedmrStatus::RunFailed,
    }
}

/// Opaque experiment handle: a built run plan plus, after a successful run,
/// its reports and summary.
pub struct FedmrExperiment {
    plan: RunPlan,
    reports: Option<Vec<RoundReport>>,
    summary: Option<ExperimentSummary>,
}

fn to_owned_cstring(text: String) -> *mut c_char {
    match CString::new(text) {
        Ok(s) => s.into_raw(),
        Err(_) => std::ptr::null_mut(),
    }
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn fedmr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// The most recent error message on this thread, or NULL. The caller owns
/// the returned string and must free it with `fedmr_string_free`.
#[no_mangle]
pub extern "C" fn fedmr_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|slot| match &*slot.borrow() {
        Some(msg) => to_owned_cstring(msg.to_string_lossy().into_owned()),
        None => std::ptr::null_mut(),
    })
}

/// Parses a JSON experiment config and builds the run plan (datasets,
/// partition, model). Returns NULL on error.
///
/// # Safety
/// `config_json` must be a valid NUL-terminated C string.
#[no_mangle]
pub unsafe extern "C" fn fedmr_experiment_from_json(config_json: *const c_char) -> *mut FedmrExperiment {
    if config_json.is_null() {
        set_error("config_json is NULL".into());
        return std::ptr::null_mut();
    }
    let text = match CStr::from_ptr(config_json).to_str() {
        Ok(t) => t,
        Err(_) => {
            set_error("config_json is not valid UTF-8".into());
            return std::ptr::null_mut();
        }
    };
    let parsed = config::parse_config_str(text).and_then(config::build_plan);
    match parsed {
        Ok(plan) => Box::into_raw(Box::new(FedmrExperiment { plan, reports: None, summary: None })),
        Err(e) => {
            set_error(e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Runs all configured rounds. Idempotent: rerunning replaces the results.
///
/// # Safety
/// `exp` must be a pointer returned by [`fedmr_experiment_from_json`] that
/// has not been freed.
#[no_mangle]
pub unsafe extern "C" fn fedmr_experiment_run(exp: *mut FedmrExperiment) -> FedmrStatus {
    let Some(exp) = exp.as_mut() else {
        set_error("experiment handle is NULL".into());
        return FedmrStatus::NullPointer;
    };
    let plan = &exp.plan;
    match federation::run_experiment(
        &plan.fed,
        &plan.model_spec,
        &plan.train,
        &plan.shards,
        &plan.test,
        &plan.config.target_accuracies,
    ) {
        Ok((reports, summary)) => {
            exp.reports = Some(reports);
            exp.summary = Some(summary);
            FedmrStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            status_for(&e)
        }
    }
}

/// Round reports as newline-delimited JSON, or NULL before a successful
/// run. Caller frees via `fedmr_string_free`.
///
/// # Safety
/// `exp` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn fedmr_experiment_rounds_jsonl(exp: *const FedmrExperiment) -> *mut c_char {
    let Some(exp) = exp.as_ref() else {
        set_error("experiment handle is NULL".into());
        return std::ptr::null_mut();
    };
    let Some(reports) = &exp.reports else {
        set_error("experiment has not been run".into());
        return std::ptr::null_mut();
    };
    let mut out = String::new();
    for r in reports {
        match serde_json::to_string(r) {
            Ok(line) => {
                out.push_str(&line);
                out.push('\n');
            }
            Err(e) => {
                set_error(e.to_string());
                return std::ptr::null_mut();
            }
        }
    }
    to_owned_cstring(out)
}

/// The end-of-run summary as JSON, or NULL before a successful run. Caller
/// frees via `fedmr_string_free`.
///
/// # Safety
/// `exp` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn fedmr_experiment_summary_json(exp: *const FedmrExperiment) -> *mut c_char {
    let Some(exp) = exp.as_ref() else {
        set_error("experiment handle is NULL".into());
        return std::ptr::null_mut();
    };
    let Some(summary) = &exp.summary else {
        set_error("experiment has not been run".into());
        return std::ptr::null_mut();
    };
    match serde_json::to_string_pretty(summary) {
        Ok(text) => to_owned_cstring(text),
        Err(e) => {
            set_error(e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Releases a string returned by this library. NULL is a no-op.
///
/// # Safety
/// `s` must be a pointer previously returned by this library and not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn fedmr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Releases an experiment handle. NULL is a no-op.
///
/// # Safety
/// `exp` must be a pointer previously returned by
/// [`fedmr_experiment_from_json`] and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fedmr_experiment_free(exp: *mut FedmrExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONFIG: &str = r#"{
        "dataset": {"kind": "circles", "n_per_class": 12},
        "partition": {"kind": "iid", "clients": 2},
        "algorithm": "fedavg",
        "rounds": 2,
        "local_epochs": 1,
        "batch_size": 16,
        "learning_rate": 0.05,
        "momentum": 0.0,
        "weight_decay": 0.0,
        "seed": 3
    }"#;

    fn cstr(text: &str) -> CString {
        CString::new(text).unwrap()
    }

    #[test]
    fn full_lifecycle() {
        unsafe {
            let cfg = cstr(CONFIG);
            let exp = fedmr_experiment_from_json(cfg.as_ptr());
            assert!(!exp.is_null());
            assert_eq!(fedmr_experiment_run(exp), FedmrStatus::Ok);

            let rounds = fedmr_experiment_rounds_jsonl(exp);
            assert!(!rounds.is_null());
            let text = CStr::from_ptr(rounds).to_str().unwrap().to_owned();
            assert_eq!(text.lines().count(), 2);
            let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
            assert_eq!(first["round"], 0);
            fedmr_string_free(rounds);

            let summary = fedmr_experiment_summary_json(exp);
            assert!(!summary.is_null());
            let parsed: serde_json::Value =
                serde_json::from_str(CStr::from_ptr(summary).to_str().unwrap()).unwrap();
            assert!(parsed["best_accuracy"].is_number());
            fedmr_string_free(summary);

            fedmr_experiment_free(exp);
        }
    }

    #[test]
    fn runs_are_deterministic_across_handles() {
        unsafe {
            let cfg = cstr(CONFIG);
            let mut outputs = Vec::new();
            for _ in 0..2 {
                let exp = fedmr_experiment_from_json(cfg.as_ptr());
                assert_eq!(fedmr_experiment_run(exp), FedmrStatus::Ok);
                let rounds = fedmr_experiment_rounds_jsonl(exp);
                outputs.push(CStr::from_ptr(rounds).to_str().unwrap().to_owned());
                fedmr_string_free(rounds);
                fedmr_experiment_free(exp);
            }
            assert_eq!(outputs[0], outputs[1]);
        }
    }

    #[test]
    fn invalid_config_reports_error() {
        unsafe {
            let cfg = cstr(r#"{"algorithm": "nope"}"#);
            let exp = fedmr_experiment_from_json(cfg.as_ptr());
            assert!(exp.is_null());
            let msg = fedmr_last_error_message();
            assert!(!msg.is_null());
            let text = CStr::from_ptr(msg).to_str().unwrap().to_owned();
            assert!(text.contains("config"), "{text}");
            fedmr_string_free(msg);
        }
    }

    #[test]
    fn null_handles_are_safe() {
        unsafe {
            assert_eq!(fedmr_experiment_run(std::ptr::null_mut()), FedmrStatus::NullPointer);
            assert!(fedmr_experiment_summary_json(std::ptr::null()).is_null());
            assert!(fedmr_experiment_rounds_jsonl(std::ptr::null()).is_null());
            assert!(fedmr_experiment_from_json(std::ptr::null()).is_null());
            fedmr_experiment_free(std::ptr::null_mut());
            fedmr_string_free(std::ptr::null_mut());
        }
    }

    #[test]
    fn results_unavailable_before_run() {
        unsafe {
            let cfg = cstr(CONFIG);
            let exp = fedmr_experiment_from_json(cfg.as_ptr());
            assert!(fedmr_experiment_summary_json(exp).is_null());
            let msg = fedmr_last_error_message();
            assert!(!msg.is_null());
            fedmr_string_free(msg);
            fedmr_experiment_free(exp);
        }
    }

    #[test]
    fn version_is_static() {
        let v = fedmr_version();
        assert!(!v.is_null());
        let text = unsafe { CStr::from_ptr(v) }.to_str().unwrap();
        assert!(!text.is_empty());
    }
}
