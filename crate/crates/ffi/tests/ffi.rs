use maisac_ffi::*;
use std::ffi::{c_char, CStr, CString};
use std::ptr;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { maisac_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn scenario(toml: &str, seed: u64) -> (MaisacStatus, *mut MaisacScenario) {
    let text = CString::new(toml).unwrap();
    let mut out = ptr::null_mut();
    let status = unsafe { maisac_scenario_new(text.as_ptr(), seed, &mut out) };
    (status, out)
}

#[test]
fn run_round_trip() {
    let (status, s) = scenario("[engine]\nmax_outer = 4\n", 3);
    assert_eq!(status, MaisacStatus::Ok);
    assert_eq!(unsafe { maisac_scenario_set_scheme(s, MaisacScheme::Fpa as i32) }, MaisacStatus::Ok);
    assert_eq!(unsafe { maisac_scenario_set_scheme(s, 99) }, MaisacStatus::OutOfRange);
    let mut run = ptr::null_mut();
    assert_eq!(unsafe { maisac_run(s, &mut run) }, MaisacStatus::Ok);
    let len = unsafe { maisac_run_len(run) };
    assert!((2..=5).contains(&len));
    let mut prev = f64::NEG_INFINITY;
    for i in 0..len {
        let mut rec = MaisacRecord { iter: 0, sum_rate_nats: 0.0, sinr_radar: 0.0, power_residual: 0.0, box_residual: 0.0, distance_residual: 0.0, elapsed_ms: 0.0 };
        assert_eq!(unsafe { maisac_run_record(run, i, &mut rec) }, MaisacStatus::Ok);
        assert_eq!(rec.iter, i);
        assert!(rec.sum_rate_nats >= prev - 1e-6);
        prev = rec.sum_rate_nats;
    }
    let mut rec = std::mem::MaybeUninit::<MaisacRecord>::uninit();
    assert_eq!(unsafe { maisac_run_record(run, len, rec.as_mut_ptr()) }, MaisacStatus::OutOfRange);
    assert!(last_error().contains("record"));
    assert!(unsafe { maisac_run_converged(run) } == 0 || unsafe { maisac_run_converged(run) } == 1);
    unsafe {
        maisac_run_free(run);
        maisac_scenario_free(s);
    }
}

#[test]
fn same_seed_same_result_through_the_abi() {
    let final_rate = || {
        let (_, s) = scenario("[engine]\nmax_outer = 3\nscheme = \"joint-ma\"\n", 8);
        let mut run = ptr::null_mut();
        assert_eq!(unsafe { maisac_run(s, &mut run) }, MaisacStatus::Ok);
        let mut rec = std::mem::MaybeUninit::<MaisacRecord>::uninit();
        let n = unsafe { maisac_run_len(run) };
        assert_eq!(unsafe { maisac_run_record(run, n - 1, rec.as_mut_ptr()) }, MaisacStatus::Ok);
        unsafe {
            maisac_run_free(run);
            maisac_scenario_free(s);
            rec.assume_init().sum_rate_nats
        }
    };
    assert_eq!(final_rate().to_bits(), final_rate().to_bits());
}

#[test]
fn errors_map_to_codes() {
    let (status, s) = scenario("[scenario]\nbogus = 1\n", 0);
    assert_eq!(status, MaisacStatus::InvalidConfig);
    assert!(s.is_null());
    assert!(last_error().contains("bogus"));

    let (status, s) = scenario("[scenario]\ngamma_r_db = 200.0\n", 0);
    assert_eq!(status, MaisacStatus::Ok);
    let mut run = ptr::null_mut();
    assert_eq!(unsafe { maisac_run(s, &mut run) }, MaisacStatus::Infeasible);
    assert!(run.is_null());
    unsafe { maisac_scenario_free(s) };

    let (status, s) = scenario("[scenario]\nn_t = 30\n", 0);
    assert_eq!(status, MaisacStatus::Ok);
    assert_eq!(unsafe { maisac_run(s, &mut run) }, MaisacStatus::Geometry);
    unsafe { maisac_scenario_free(s) };

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { maisac_scenario_new(ptr::null(), 0, &mut out) }, MaisacStatus::NullArgument);
    assert_eq!(unsafe { maisac_run(ptr::null(), &mut run) }, MaisacStatus::NullArgument);
    let bad = [0xffu8 as c_char, 0];
    assert_eq!(unsafe { maisac_scenario_new(bad.as_ptr(), 0, &mut out) }, MaisacStatus::InvalidUtf8);
    assert_eq!(unsafe { maisac_run_len(ptr::null()) }, 0);
    unsafe {
        maisac_run_free(ptr::null_mut());
        maisac_scenario_free(ptr::null_mut());
    }
}

#[test]
fn last_error_truncates_and_terminates() {
    let _ = scenario("[engine]\nepsilon = -1.0\n", 0);
    let full = unsafe { maisac_last_error(ptr::null_mut(), 0) };
    let mut buf = [1 as c_char; 5];
    assert_eq!(unsafe { maisac_last_error(buf.as_mut_ptr(), buf.len()) }, full);
    assert_eq!(buf[4], 0);
}

#[test]
fn status_strings_are_static() {
    for s in [MaisacStatus::Ok, MaisacStatus::Infeasible, MaisacStatus::Panic] {
        let text = unsafe { CStr::from_ptr(maisac_status_str(s)) };
        assert!(!text.to_bytes().is_empty());
    }
}

#[test]
fn header_declares_the_abi() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/maisac.h")).unwrap();
    for name in ["maisac_scenario_new", "maisac_run", "maisac_run_record", "maisac_last_error", "MAISAC_STATUS_INFEASIBLE", "MAISAC_SCHEME_FPA", "MaisacRecord"] {
        assert!(header.contains(name), "{name}");
    }
    // The header must compile as C on its own when a compiler is around.
    if let Ok(out) = std::process::Command::new("cc").args(["-fsyntax-only", "-x", "c", concat!(env!("CARGO_MANIFEST_DIR"), "/include/maisac.h")]).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
