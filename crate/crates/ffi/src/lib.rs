//! C ABI for the auction simulator and metric core: opaque handles, integer
//! status codes, and a thread-local last-error message. The matching header
//! is maintained by hand at `include/autobid.h`.

use std::cell::RefCell;
use std::ffi::{c_char, c_double, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use autobid_core::objective::evaluate_totals;
use autobid_core::sim::{BidEnv, EpisodeConfig, STATE_DIM};
use autobid_core::Error;

pub const AUTOBID_OK: c_int = 0;
pub const AUTOBID_ERR_NULL_POINTER: c_int = 1;
pub const AUTOBID_ERR_CONFIG: c_int = 2;
pub const AUTOBID_ERR_INVALID_ARGUMENT: c_int = 3;
pub const AUTOBID_ERR_EPISODE_FINISHED: c_int = 4;
pub const AUTOBID_ERR_UTF8: c_int = 5;
pub const AUTOBID_ERR_INTERNAL: c_int = 6;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn code_for(err: &Error) -> c_int {
    match err {
        Error::Config(_) => AUTOBID_ERR_CONFIG,
        Error::EpisodeFinished => AUTOBID_ERR_EPISODE_FINISHED,
        Error::InvalidArgument(_) | Error::InvalidOpportunity(_) => AUTOBID_ERR_INVALID_ARGUMENT,
        _ => AUTOBID_ERR_INTERNAL,
    }
}

/// Opaque simulator episode handle.
pub struct AutobidEnv {
    env: BidEnv,
    cfg: EpisodeConfig,
}

/// Episode metrics snapshot; layout is part of the ABI.
#[repr(C)]
pub struct AutobidMetrics {
    pub conversions: c_double,
    pub budget_utilization: c_double,
    pub cpa_ratio: c_double,
    pub penalty: c_double,
    pub score: c_double,
}

/// Version of the shared library, as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn autobid_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Number of features in a state vector.
#[no_mangle]
pub extern "C" fn autobid_state_dim() -> c_int {
    STATE_DIM as c_int
}

/// Message for the most recent error on this thread; valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn autobid_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

fn env_from_config(cfg: EpisodeConfig) -> Result<*mut AutobidEnv, Error> {
    cfg.validate()?;
    let env = BidEnv::new(cfg.clone())?;
    Ok(Box::into_raw(Box::new(AutobidEnv { env, cfg })))
}

/// New episode under the default configuration with the given RNG seed.
/// Returns NULL only on internal failure.
#[no_mangle]
pub extern "C" fn autobid_env_new(seed: u64) -> *mut AutobidEnv {
    let mut cfg = EpisodeConfig::default();
    cfg.rng_seed = seed;
    match env_from_config(cfg) {
        Ok(p) => p,
        Err(e) => {
            set_error(&e.to_string());
            ptr::null_mut()
        }
    }
}

/// New episode from a JSON configuration document (same schema as the
/// `simulator` section of the run configuration). On success stores the
/// handle in `out_env`.
#[no_mangle]
pub extern "C" fn autobid_env_new_json(
    config_json: *const c_char,
    out_env: *mut *mut AutobidEnv,
) -> c_int {
    if config_json.is_null() || out_env.is_null() {
        set_error("null pointer argument");
        return AUTOBID_ERR_NULL_POINTER;
    }
    let text = match unsafe { CStr::from_ptr(config_json) }.to_str() {
        Ok(t) => t,
        Err(_) => {
            set_error("configuration is not valid UTF-8");
            return AUTOBID_ERR_UTF8;
        }
    };
    let cfg: EpisodeConfig = match serde_json::from_str(text) {
        Ok(c) => c,
        Err(e) => {
            set_error(&format!("configuration schema: {e}"));
            return AUTOBID_ERR_CONFIG;
        }
    };
    match env_from_config(cfg) {
        Ok(p) => {
            unsafe { *out_env = p };
            AUTOBID_OK
        }
        Err(e) => {
            set_error(&e.to_string());
            code_for(&e)
        }
    }
}

/// Release an episode handle. NULL is a no-op.
#[no_mangle]
pub extern "C" fn autobid_env_free(env: *mut AutobidEnv) {
    if !env.is_null() {
        drop(unsafe { Box::from_raw(env) });
    }
}

/// Advance one decision interval with the given scalar action; writes the
/// interval reward (conversions) to `out_reward` when non-NULL.
#[no_mangle]
pub extern "C" fn autobid_env_step(
    env: *mut AutobidEnv,
    action: c_double,
    out_reward: *mut c_double,
) -> c_int {
    let Some(handle) = (unsafe { env.as_mut() }) else {
        set_error("null env handle");
        return AUTOBID_ERR_NULL_POINTER;
    };
    let result = catch_unwind(AssertUnwindSafe(|| handle.env.step(action)));
    match result {
        Ok(Ok((_, reward))) => {
            if !out_reward.is_null() {
                unsafe { *out_reward = reward };
            }
            AUTOBID_OK
        }
        Ok(Err(e)) => {
            set_error(&e.to_string());
            code_for(&e)
        }
        Err(_) => {
            set_error("internal panic in step");
            AUTOBID_ERR_INTERNAL
        }
    }
}

/// Copy the current state vector into `out` (capacity `len`, which must be at
/// least `autobid_state_dim()`).
#[no_mangle]
pub extern "C" fn autobid_env_state(
    env: *const AutobidEnv,
    out: *mut c_double,
    len: usize,
) -> c_int {
    let Some(handle) = (unsafe { env.as_ref() }) else {
        set_error("null env handle");
        return AUTOBID_ERR_NULL_POINTER;
    };
    if out.is_null() {
        set_error("null output buffer");
        return AUTOBID_ERR_NULL_POINTER;
    }
    if len < STATE_DIM {
        set_error("state buffer too small");
        return AUTOBID_ERR_INVALID_ARGUMENT;
    }
    let state = handle.env.build_state();
    unsafe { ptr::copy_nonoverlapping(state.as_slice().as_ptr(), out, STATE_DIM) };
    AUTOBID_OK
}

/// Cumulative spend so far.
#[no_mangle]
pub extern "C" fn autobid_env_spent(env: *const AutobidEnv) -> c_double {
    unsafe { env.as_ref() }.map(|h| h.env.spent()).unwrap_or(f64::NAN)
}

/// Cumulative conversions so far.
#[no_mangle]
pub extern "C" fn autobid_env_conversions(env: *const AutobidEnv) -> c_double {
    unsafe { env.as_ref() }.map(|h| h.env.conversions()).unwrap_or(f64::NAN)
}

/// Episode metrics for the intervals executed so far.
#[no_mangle]
pub extern "C" fn autobid_env_metrics(
    env: *const AutobidEnv,
    out: *mut AutobidMetrics,
) -> c_int {
    let Some(handle) = (unsafe { env.as_ref() }) else {
        set_error("null env handle");
        return AUTOBID_ERR_NULL_POINTER;
    };
    if out.is_null() {
        set_error("null metrics pointer");
        return AUTOBID_ERR_NULL_POINTER;
    }
    match evaluate_totals(&handle.env.totals(), handle.cfg.cpa_constraint, handle.cfg.budget) {
        Ok(report) => {
            unsafe {
                (*out).conversions = report.conversions;
                (*out).budget_utilization = report.budget_utilization;
                (*out).cpa_ratio = report.cpa_ratio;
                (*out).penalty = report.penalty;
                (*out).score = report.score;
            }
            AUTOBID_OK
        }
        Err(e) => {
            set_error(&e.to_string());
            code_for(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    #[test]
    fn version_and_dim() {
        let v = unsafe { CStr::from_ptr(autobid_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
        assert_eq!(autobid_state_dim(), STATE_DIM as c_int);
    }

    #[test]
    fn full_episode_through_abi() {
        let cfg = CString::new(
            r#"{"num_steps": 4, "impressions_per_step": 20, "budget": 100.0}"#,
        )
        .unwrap();
        let mut env: *mut AutobidEnv = ptr::null_mut();
        assert_eq!(autobid_env_new_json(cfg.as_ptr(), &mut env), AUTOBID_OK);
        let mut state = [0.0; STATE_DIM];
        let mut total_reward = 0.0;
        for _ in 0..4 {
            assert_eq!(autobid_env_state(env, state.as_mut_ptr(), STATE_DIM), AUTOBID_OK);
            let mut r = 0.0;
            assert_eq!(autobid_env_step(env, 1.0, &mut r), AUTOBID_OK);
            total_reward += r;
        }
        // stepping past the end reports the finished-episode code
        assert_eq!(
            autobid_env_step(env, 1.0, ptr::null_mut()),
            AUTOBID_ERR_EPISODE_FINISHED
        );
        let mut m = AutobidMetrics {
            conversions: 0.0,
            budget_utilization: 0.0,
            cpa_ratio: 0.0,
            penalty: 0.0,
            score: 0.0,
        };
        assert_eq!(autobid_env_metrics(env, &mut m), AUTOBID_OK);
        assert!((m.conversions - total_reward).abs() < 1e-12);
        assert!(m.budget_utilization <= 1.0);
        autobid_env_free(env);
    }

    #[test]
    fn null_and_bad_inputs() {
        assert_eq!(
            autobid_env_step(ptr::null_mut(), 1.0, ptr::null_mut()),
            AUTOBID_ERR_NULL_POINTER
        );
        let msg = unsafe { CStr::from_ptr(autobid_last_error_message()) };
        assert!(!msg.to_bytes().is_empty());

        let bad = CString::new(r#"{"num_steps": 0}"#).unwrap();
        let mut env: *mut AutobidEnv = ptr::null_mut();
        let code = autobid_env_new_json(bad.as_ptr(), &mut env);
        assert_ne!(code, AUTOBID_OK);
        assert!(env.is_null());

        let env = autobid_env_new(3);
        assert!(!env.is_null());
        let mut small = [0.0; 2];
        assert_eq!(
            autobid_env_state(env, small.as_mut_ptr(), small.len()),
            AUTOBID_ERR_INVALID_ARGUMENT
        );
        autobid_env_free(env);
        autobid_env_free(ptr::null_mut());
    }

    #[test]
    fn invalid_action_rejected_through_abi() {
        let env = autobid_env_new(1);
        let code = autobid_env_step(env, f64::NAN, ptr::null_mut());
        assert_eq!(code, AUTOBID_ERR_INVALID_ARGUMENT);
        autobid_env_free(env);
    }
}
