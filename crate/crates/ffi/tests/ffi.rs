use std::ffi::{CStr, CString};
use std::ptr;

use abacus_rl::net::{save_checkpoint, ArchConfig, ArchPreset, Checkpoint, NetParams};
use abacus_rl_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    unsafe {
        abacus_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn new_env(columns: usize, seed: u64) -> *mut AbacusEnvHandle {
    let mut h = ptr::null_mut();
    let s = unsafe { abacus_env_new(columns, 1, 3, 2, 0, seed, &mut h) };
    assert_eq!(s, AbacusStatus::Ok);
    assert!(!h.is_null());
    h
}

fn value(h: *mut AbacusEnvHandle) -> String {
    let mut buf = vec![0 as std::ffi::c_char; 64];
    let mut needed = 0usize;
    let s = unsafe { abacus_env_value(h, buf.as_mut_ptr(), buf.len(), &mut needed) };
    assert_eq!(s, AbacusStatus::Ok);
    let v = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string();
    assert_eq!(v.len(), needed);
    v
}

/// Follows the solver until the episode ends; returns the last step.
fn drive_with_solver(h: *mut AbacusEnvHandle) -> AbacusStepOut {
    let mut out = AbacusStepOut::default();
    for _ in 0..10_000 {
        let mut a = 0u32;
        assert_eq!(unsafe { abacus_env_prescription(h, &mut a) }, AbacusStatus::Ok);
        assert_eq!(unsafe { abacus_env_step(h, a, &mut out) }, AbacusStatus::Ok);
        if out.done != 0 {
            return out;
        }
    }
    panic!("episode did not end");
}

#[test]
fn scripted_episode_reaches_the_sum() {
    let h = new_env(5, 1);
    let ops = CString::new("+14,+3,-2").unwrap();
    assert_eq!(unsafe { abacus_env_reset_scripted(h, ops.as_ptr()) }, AbacusStatus::Ok);
    assert_eq!(value(h), "0");
    let out = drive_with_solver(h);
    assert_eq!(out.operations_completed, 3);
    let name = unsafe { CStr::from_ptr(abacus_cause_name(out.cause)) };
    assert_eq!(name.to_str().unwrap(), "completed");
    // 14_5 + 3 - 2 = 9 + 1 = 10
    assert_eq!(value(h), "10");
    assert_eq!(unsafe { abacus_env_step(h, 0, ptr::null_mut()) }, AbacusStatus::EpisodeFinished);
    unsafe { abacus_env_free(h) };
}

#[test]
fn buffers_are_filled() {
    let h = new_env(4, 2);
    let mut obs = vec![-1f32; abacus_observation_len()];
    assert_eq!(obs.len(), 108);
    assert_eq!(unsafe { abacus_env_observe(h, obs.as_mut_ptr(), obs.len()) }, AbacusStatus::Ok);
    assert!(obs.iter().all(|v| v.is_finite() && *v >= 0.0));
    assert!(obs.iter().any(|v| *v > 0.0));
    let mut sym = [-1f32; 9];
    assert_eq!(unsafe { abacus_env_symbol(h, sym.as_mut_ptr(), 9) }, AbacusStatus::Ok);
    assert_eq!(sym.iter().filter(|v| **v == 1.0).count(), 2);
    let mut mask = [9u8; 8];
    assert_eq!(unsafe { abacus_env_mask(h, mask.as_mut_ptr(), 8) }, AbacusStatus::Ok);
    assert!(mask.iter().all(|m| *m <= 1));
    assert!(mask.contains(&1));
    unsafe { abacus_env_free(h) };
}

#[test]
fn errors_carry_codes_and_messages() {
    let h = new_env(4, 3);
    let mut obs = [0f32; 10];
    assert_eq!(unsafe { abacus_env_observe(h, obs.as_mut_ptr(), 10) }, AbacusStatus::BufferTooSmall);
    assert!(last_error().contains("108"));
    assert_eq!(unsafe { abacus_env_step(h, 8, ptr::null_mut()) }, AbacusStatus::InvalidArgument);
    assert!(last_error().contains("unknown action"));

    let mut mask = [0u8; 8];
    unsafe { abacus_env_mask(h, mask.as_mut_ptr(), 8) };
    if let Some(illegal) = mask.iter().position(|m| *m == 0) {
        assert_eq!(
            unsafe { abacus_env_step(h, illegal as u32, ptr::null_mut()) },
            AbacusStatus::IllegalAction
        );
    }

    let bad = CString::new("+19").unwrap();
    assert_eq!(unsafe { abacus_env_reset_scripted(h, bad.as_ptr()) }, AbacusStatus::InvalidArgument);
    assert!(last_error().contains("digit"));

    let mut small = [0 as std::ffi::c_char; 1];
    let mut needed = 0;
    assert_eq!(
        unsafe { abacus_env_value(h, small.as_mut_ptr(), 1, &mut needed) },
        AbacusStatus::BufferTooSmall
    );
    assert!(needed >= 1);
    unsafe { abacus_env_free(h) };

    assert_eq!(unsafe { abacus_env_reset(ptr::null_mut()) }, AbacusStatus::NullPointer);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { abacus_env_new(0, 1, 1, 0, 0, 0, &mut out) }, AbacusStatus::InvalidArgument);
    assert_eq!(unsafe { abacus_env_new(3, 1, 1, 7, 0, 0, &mut out) }, AbacusStatus::InvalidArgument);
    assert!(out.is_null());
    unsafe { abacus_env_free(ptr::null_mut()) };
}

#[test]
fn last_error_reports_length_and_truncates() {
    let mut out = ptr::null_mut();
    unsafe { abacus_env_new(3, 1, 1, 9, 0, 0, &mut out) };
    let full = unsafe { abacus_last_error(ptr::null_mut(), 0) };
    assert!(full > 4);
    let mut buf = [1 as std::ffi::c_char; 4];
    assert_eq!(unsafe { abacus_last_error(buf.as_mut_ptr(), 4) }, full);
    assert_eq!(buf[3], 0);
}

#[test]
fn policy_loads_and_acts_legally() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    let params = NetParams::init(&ArchConfig::preset(ArchPreset::Desk), 5).unwrap();
    let ck = Checkpoint {
        params,
        metadata: serde_json::json!({}),
        extra: vec![],
    };
    save_checkpoint(&path, &ck).unwrap();

    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { abacus_policy_load(cpath.as_ptr(), 0, 11, &mut p) }, AbacusStatus::Ok);
    let h = new_env(3, 4);
    let mut prev = -1i32;
    for _ in 0..50 {
        let mut a = 0u32;
        assert_eq!(unsafe { abacus_policy_act(p, h, prev, &mut a) }, AbacusStatus::Ok);
        let mut mask = [0u8; 8];
        unsafe { abacus_env_mask(h, mask.as_mut_ptr(), 8) };
        assert_eq!(mask[a as usize], 1);
        let mut out = AbacusStepOut::default();
        assert_eq!(unsafe { abacus_env_step(h, a, &mut out) }, AbacusStatus::Ok);
        prev = a as i32;
        if out.done != 0 {
            unsafe { abacus_env_reset(h) };
            prev = -1;
        }
    }
    assert_eq!(unsafe { abacus_policy_act(p, h, 12, &mut 0) }, AbacusStatus::InvalidArgument);
    unsafe {
        abacus_env_free(h);
        abacus_policy_free(p);
    }

    let missing = CString::new(dir.path().join("nope.ckpt").to_str().unwrap()).unwrap();
    let mut q = ptr::null_mut();
    assert_eq!(unsafe { abacus_policy_load(missing.as_ptr(), 1, 0, &mut q) }, AbacusStatus::Io);
    std::fs::write(&path, b"garbage-garbage-garbage").unwrap();
    assert_eq!(
        unsafe { abacus_policy_load(cpath.as_ptr(), 1, 0, &mut q) },
        AbacusStatus::Checkpoint
    );
    assert!(q.is_null());
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/abacus_rl.h")).unwrap();
    for sym in [
        "abacus_env_new",
        "abacus_env_step",
        "abacus_policy_act",
        "ABACUS_STATUS_OK",
        "AbacusStepOut",
    ] {
        assert!(header.contains(sym), "{sym} missing from header");
    }
}
