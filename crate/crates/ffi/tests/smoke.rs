//! Drives the C ABI end to end the way a foreign binding would.

use std::ffi::{CStr, CString};

use sgdtune_ffi::*;

fn last_error() -> String {
    let ptr = sgdtune_last_error_message();
    assert!(!ptr.is_null(), "expected an error message");
    let msg = unsafe { CStr::from_ptr(ptr) }.to_string_lossy().to_string();
    unsafe { sgdtune_string_free(ptr) };
    msg
}

#[test]
fn optimize_roundtrip_through_c_abi() {
    unsafe {
        let workload = CString::new("googlenet").unwrap();
        let mut scenario: *mut SgdtuneScenario = std::ptr::null_mut();
        let status = sgdtune_scenario_from_setting(
            'A' as std::ffi::c_char,
            workload.as_ptr(),
            64,
            &mut scenario,
        );
        assert_eq!(status, SgdtuneStatus::Ok);
        assert!(!scenario.is_null());

        let method = CString::new("bespoke").unwrap();
        let mut run: *mut SgdtuneRun = std::ptr::null_mut();
        let status = sgdtune_optimize(scenario, method.as_ptr(), 3, 1, &mut run);
        assert_eq!(status, SgdtuneStatus::Ok);
        assert_eq!(sgdtune_run_len(run), 3);

        let mut prev_best = f64::INFINITY;
        for i in 0..3 {
            let mut objective = 0.0;
            assert_eq!(
                sgdtune_run_objective(run, i, &mut objective),
                SgdtuneStatus::Ok
            );
            assert!(objective > 0.0);
            let mut best = 0.0;
            assert_eq!(
                sgdtune_run_best_so_far(run, i, &mut best),
                SgdtuneStatus::Ok
            );
            assert!(best <= prev_best);
            prev_best = best;

            let digest = sgdtune_run_config_digest(run, i);
            assert!(!digest.is_null());
            let text = CStr::from_ptr(digest).to_string_lossy().to_string();
            assert!(text.contains("ps["), "digest {text}");
            sgdtune_string_free(digest);
        }
        assert_eq!(sgdtune_run_best(run), prev_best);

        // Out-of-range index errors and leaves a message.
        let mut v = 0.0;
        assert_eq!(
            sgdtune_run_objective(run, 99, &mut v),
            SgdtuneStatus::InvalidArgument
        );
        assert!(last_error().contains("out of range"));

        sgdtune_run_free(run);
        sgdtune_scenario_free(scenario);
    }
}

#[test]
fn invalid_inputs_report_errors() {
    unsafe {
        let workload = CString::new("googlenet").unwrap();
        let mut scenario: *mut SgdtuneScenario = std::ptr::null_mut();

        // Unknown setting.
        let status = sgdtune_scenario_from_setting(
            'Z' as std::ffi::c_char,
            workload.as_ptr(),
            64,
            &mut scenario,
        );
        assert_eq!(status, SgdtuneStatus::InvalidArgument);
        assert!(last_error().contains("unknown setting"));

        // Null out pointer.
        let status = sgdtune_scenario_from_setting(
            'A' as std::ffi::c_char,
            workload.as_ptr(),
            64,
            std::ptr::null_mut(),
        );
        assert_eq!(status, SgdtuneStatus::NullPointer);

        // Valid scenario, bad method.
        let status = sgdtune_scenario_from_setting(
            'A' as std::ffi::c_char,
            workload.as_ptr(),
            64,
            &mut scenario,
        );
        assert_eq!(status, SgdtuneStatus::Ok);
        let method = CString::new("annealing").unwrap();
        let mut run: *mut SgdtuneRun = std::ptr::null_mut();
        let status = sgdtune_optimize(scenario, method.as_ptr(), 3, 1, &mut run);
        assert_eq!(status, SgdtuneStatus::InvalidArgument);
        assert!(last_error().contains("unknown method"));

        // GPU baseline on a CPU-only setting.
        let method = CString::new("uniform_gpus").unwrap();
        let status = sgdtune_optimize(scenario, method.as_ptr(), 1, 1, &mut run);
        assert_eq!(status, SgdtuneStatus::InvalidArgument);
        assert!(last_error().contains("no gpu devices"));

        sgdtune_scenario_free(scenario);
        sgdtune_scenario_free(std::ptr::null_mut());
        sgdtune_run_free(std::ptr::null_mut());
    }
}
