//! C ABI over the optimizer.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `_free` function. Every fallible call returns a [`MaisacStatus`];
//! on failure [`maisac_last_error`] holds a message for the calling thread.
//! Panics never cross the boundary: they surface as `MAISAC_STATUS_PANIC`.

use maisac::channel::{generate_scenario, Scenario};
use maisac::cli::RunConfig;
use maisac::engine::{run, EngineConfig, EngineError, IterateLog, Scheme};
use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaisacStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    Geometry = 4,
    Infeasible = 5,
    OutOfRange = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaisacScheme {
    JointMa = 0,
    BsMa = 1,
    UserMa = 2,
    RandMa = 3,
    Fpa = 4,
}

impl MaisacScheme {
    fn from_raw(v: i32) -> Option<Self> {
        [Self::JointMa, Self::BsMa, Self::UserMa, Self::RandMa, Self::Fpa].into_iter().find(|s| *s as i32 == v)
    }
}

impl From<MaisacScheme> for Scheme {
    fn from(s: MaisacScheme) -> Self {
        match s {
            MaisacScheme::JointMa => Scheme::JointMa,
            MaisacScheme::BsMa => Scheme::BsMa,
            MaisacScheme::UserMa => Scheme::UserMa,
            MaisacScheme::RandMa => Scheme::RandMa,
            MaisacScheme::Fpa => Scheme::Fpa,
        }
    }
}

/// A generated problem instance plus the engine settings it was loaded with.
pub struct MaisacScenario {
    scenario: Scenario,
    engine: EngineConfig,
    seed: u64,
}

/// A finished optimization run.
pub struct MaisacRun {
    log: IterateLog,
}

/// One logged iterate; `iter = 0` is the initial point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaisacRecord {
    pub iter: usize,
    pub sum_rate_nats: f64,
    /// Linear sensing SINR.
    pub sinr_radar: f64,
    pub power_residual: f64,
    pub box_residual: f64,
    pub distance_residual: f64,
    pub elapsed_ms: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        // Interior NULs would truncate the C string early.
        e.extend(msg.bytes().filter(|b| *b != 0));
    });
}

fn fail(status: MaisacStatus, msg: impl AsRef<str>) -> MaisacStatus {
    set_error(msg.as_ref());
    status
}

fn guard(f: impl FnOnce() -> MaisacStatus) -> MaisacStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(MaisacStatus::Panic, msg)
        }
    }
}

fn engine_status(e: &EngineError) -> MaisacStatus {
    match e {
        EngineError::InvalidConfig(_) => MaisacStatus::InvalidConfig,
        EngineError::Geometry { .. } => MaisacStatus::Geometry,
        EngineError::Infeasible { .. } => MaisacStatus::Infeasible,
    }
}

/// Parses a TOML run config (`[scenario]`, `[engine]`; empty means defaults)
/// and draws the instance for `seed`.
///
/// # Safety
/// `config_toml` must be NULL or a NUL-terminated string; `out` must be NULL
/// or valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn maisac_scenario_new(config_toml: *const c_char, seed: u64, out: *mut *mut MaisacScenario) -> MaisacStatus {
    guard(|| {
        if config_toml.is_null() || out.is_null() {
            return fail(MaisacStatus::NullArgument, "config and out must be non-null");
        }
        *out = ptr::null_mut();
        let Ok(text) = CStr::from_ptr(config_toml).to_str() else {
            return fail(MaisacStatus::InvalidUtf8, "config is not UTF-8");
        };
        let cfg = match RunConfig::from_toml(text) {
            Ok(c) => c,
            Err(e) => return fail(MaisacStatus::InvalidConfig, e.to_string()),
        };
        let scenario = match generate_scenario(&cfg.scenario, seed) {
            Ok(s) => s,
            Err(e) => return fail(MaisacStatus::InvalidConfig, e.to_string()),
        };
        *out = Box::into_raw(Box::new(MaisacScenario { scenario, engine: cfg.engine, seed }));
        MaisacStatus::Ok
    })
}

/// # Safety
/// `scenario` must be NULL or a handle from [`maisac_scenario_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn maisac_scenario_free(scenario: *mut MaisacScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Overrides the scheme the scenario's engine settings will run. `scheme` is
/// a `MaisacScheme` value, taken as an integer so that stray values are
/// rejected instead of being undefined behavior.
///
/// # Safety
/// `scenario` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn maisac_scenario_set_scheme(scenario: *mut MaisacScenario, scheme: i32) -> MaisacStatus {
    guard(|| {
        let Some(s) = scenario.as_mut() else {
            return fail(MaisacStatus::NullArgument, "scenario must be non-null");
        };
        let Some(scheme) = MaisacScheme::from_raw(scheme) else {
            return fail(MaisacStatus::OutOfRange, format!("unknown scheme {scheme}"));
        };
        s.engine.scheme = scheme.into();
        MaisacStatus::Ok
    })
}

/// Initializes and optimizes; the layout jitter uses the scenario's seed.
///
/// # Safety
/// `scenario` must be NULL or a live handle; `out` NULL or valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn maisac_run(scenario: *const MaisacScenario, out: *mut *mut MaisacRun) -> MaisacStatus {
    guard(|| {
        if scenario.is_null() || out.is_null() {
            return fail(MaisacStatus::NullArgument, "scenario and out must be non-null");
        }
        *out = ptr::null_mut();
        let s = &*scenario;
        match run(&s.scenario, &s.engine, s.seed) {
            Ok(log) => {
                *out = Box::into_raw(Box::new(MaisacRun { log }));
                MaisacStatus::Ok
            }
            Err(e) => fail(engine_status(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `run` must be NULL or a handle from [`maisac_run`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn maisac_run_free(run: *mut MaisacRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Number of logged iterates, initial point included; 0 for NULL.
///
/// # Safety
/// `run` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn maisac_run_len(run: *const MaisacRun) -> usize {
    run.as_ref().map_or(0, |r| r.log.records.len())
}

/// 1 if the tolerance was met before the iteration limit, 0 otherwise or for NULL.
///
/// # Safety
/// `run` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn maisac_run_converged(run: *const MaisacRun) -> i32 {
    run.as_ref().map_or(0, |r| i32::from(r.log.converged))
}

/// # Safety
/// `run` must be NULL or a live handle; `out` NULL or valid for one write.
#[no_mangle]
pub unsafe extern "C" fn maisac_run_record(run: *const MaisacRun, index: usize, out: *mut MaisacRecord) -> MaisacStatus {
    guard(|| {
        let (Some(r), false) = (run.as_ref(), out.is_null()) else {
            return fail(MaisacStatus::NullArgument, "run and out must be non-null");
        };
        let Some(rec) = r.log.records.get(index) else {
            return fail(MaisacStatus::OutOfRange, format!("record {index} of {}", r.log.records.len()));
        };
        *out = MaisacRecord {
            iter: rec.iter,
            sum_rate_nats: rec.sum_rate,
            sinr_radar: rec.sinr_radar,
            power_residual: rec.power_residual,
            box_residual: rec.box_residual,
            distance_residual: rec.distance_residual,
            elapsed_ms: rec.elapsed.as_secs_f64() * 1e3,
        };
        MaisacStatus::Ok
    })
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`) and returns its full length.
///
/// # Safety
/// `buf` must be NULL or valid for `len` byte writes.
#[no_mangle]
pub unsafe extern "C" fn maisac_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = e.len().min(len - 1);
            ptr::copy_nonoverlapping(e.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn maisac_status_str(status: MaisacStatus) -> *const c_char {
    let s: &'static CStr = match status {
        MaisacStatus::Ok => c"ok",
        MaisacStatus::NullArgument => c"null argument",
        MaisacStatus::InvalidUtf8 => c"invalid UTF-8",
        MaisacStatus::InvalidConfig => c"invalid configuration",
        MaisacStatus::Geometry => c"antennas do not fit the region",
        MaisacStatus::Infeasible => c"sensing floor unattainable",
        MaisacStatus::OutOfRange => c"index out of range",
        MaisacStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}
