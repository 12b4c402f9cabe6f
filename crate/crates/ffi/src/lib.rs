//! C ABI over the abacus environment, the scripted solver and trained
//! policies.
//!
//! Every function returns an [`AbacusStatus`]. On failure a description is
//! kept per thread and can be read with [`abacus_last_error`]. Handles are
//! opaque, created by `*_new` / `*_load` and released by the matching
//! `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use abacus_rl::abacus::{Action, NUM_ACTIONS};
use abacus_rl::env::{AbacusEnv, EpisodeConfig, Operation, RewardConfig, RewardPreset, Task, TerminationCause, SYMBOL_LEN};
use abacus_rl::eval::{NetPolicy, Policy};
use abacus_rl::net::{load_checkpoint, OBS_FLAT_LEN};
use abacus_rl::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbacusStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    IllegalAction = 3,
    EpisodeFinished = 4,
    BufferTooSmall = 5,
    Io = 6,
    Checkpoint = 7,
    Internal = 8,
}

/// Outcome of one environment step.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AbacusStepOut {
    pub reward: f64,
    /// 1 when the episode ended with this step.
    pub done: u8,
    /// Termination cause code (see [`abacus_cause_name`]), or -1.
    pub cause: i32,
    pub operations_completed: u64,
    pub budget_remaining: u32,
}

/// Opaque environment handle.
pub struct AbacusEnvHandle {
    env: AbacusEnv,
}

/// Opaque policy handle.
pub struct AbacusPolicyHandle {
    policy: NetPolicy,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> AbacusStatus {
    match e {
        Error::IllegalAction(_) | Error::MaskedAction(_) => AbacusStatus::IllegalAction,
        Error::EpisodeFinished => AbacusStatus::EpisodeFinished,
        Error::Io(_) => AbacusStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) => AbacusStatus::Checkpoint,
        Error::NonFinite(_) | Error::Shape(_) => AbacusStatus::Internal,
        _ => AbacusStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (AbacusStatus, String)>) -> AbacusStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AbacusStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            AbacusStatus::Internal
        }
    }
}

fn lib(e: Error) -> (AbacusStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (AbacusStatus, String) {
    (AbacusStatus::NullPointer, format!("{what} is null"))
}

fn cause_code(c: TerminationCause) -> i32 {
    match c {
        TerminationCause::WrongSignpost => 0,
        TerminationCause::WrongMoveSlide => 1,
        TerminationCause::WrongSubmit => 2,
        TerminationCause::BudgetExhausted => 3,
        TerminationCause::Capacity => 4,
        TerminationCause::Completed => 5,
    }
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string and returns the message length (excluding the
/// NUL). Truncates when `len` is too small. `buf` may be null to query
/// the length.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn abacus_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Static name of a termination cause code, or null if out of range.
#[no_mangle]
pub extern "C" fn abacus_cause_name(code: i32) -> *const c_char {
    const NAMES: [&CStr; 6] = [
        c"wrong_signpost",
        c"wrong_move_slide",
        c"wrong_submit",
        c"budget_exhausted",
        c"capacity",
        c"completed",
    ];
    usize::try_from(code)
        .ok()
        .and_then(|i| NAMES.get(i))
        .map_or(ptr::null(), |s| s.as_ptr())
}

/// Flat observation length: 3 frames × 6 rows × 2 columns × 3 channels.
#[no_mangle]
pub extern "C" fn abacus_observation_len() -> usize {
    OBS_FLAT_LEN
}

/// Creates an environment. `task`: 0 add, 1 sub, 2 both. `preset`: 0
/// dense, 1 no finger shaping, 2 no finger shaping and no signpost reward.
///
/// # Safety
/// `out` must be valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn abacus_env_new(
    columns: usize,
    min_len: usize,
    max_len: usize,
    task: u32,
    preset: u32,
    seed: u64,
    out: *mut *mut AbacusEnvHandle,
) -> AbacusStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let task = match task {
            0 => Task::AddOnly,
            1 => Task::SubOnly,
            2 => Task::Both,
            _ => return Err((AbacusStatus::InvalidArgument, format!("unknown task {task}"))),
        };
        let preset = match preset {
            0 => RewardPreset::Dense,
            1 => RewardPreset::NoOf,
            2 => RewardPreset::NoOfSp,
            _ => return Err((AbacusStatus::InvalidArgument, format!("unknown preset {preset}"))),
        };
        let cfg = EpisodeConfig {
            columns,
            min_len,
            max_len,
            task,
            seed,
            reward: RewardConfig::preset(preset),
            ..EpisodeConfig::default()
        };
        let mut env = AbacusEnv::new(cfg).map_err(lib)?;
        env.reset();
        *out = Box::into_raw(Box::new(AbacusEnvHandle { env }));
        Ok(())
    })
}

/// Releases an environment. Null is ignored.
///
/// # Safety
/// `h` must come from [`abacus_env_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn abacus_env_free(h: *mut AbacusEnvHandle) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

unsafe fn env_mut<'a>(h: *mut AbacusEnvHandle) -> Result<&'a mut AbacusEnv, (AbacusStatus, String)> {
    h.as_mut().map(|h| &mut h.env).ok_or_else(|| null("environment"))
}

/// Starts a new sampled episode.
///
/// # Safety
/// `h` must be a live environment handle.
#[no_mangle]
pub unsafe extern "C" fn abacus_env_reset(h: *mut AbacusEnvHandle) -> AbacusStatus {
    guard(|| {
        env_mut(h)?.reset();
        Ok(())
    })
}

/// Starts an episode that runs exactly the given operations, written in
/// base 5 and comma separated, e.g. `"+1234,-402"`.
///
/// # Safety
/// `h` must be a live environment handle and `ops` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn abacus_env_reset_scripted(h: *mut AbacusEnvHandle, ops: *const c_char) -> AbacusStatus {
    guard(|| {
        let env = env_mut(h)?;
        if ops.is_null() {
            return Err(null("ops"));
        }
        let text = CStr::from_ptr(ops)
            .to_str()
            .map_err(|_| (AbacusStatus::InvalidArgument, "ops is not UTF-8".to_string()))?;
        let ops = Operation::parse_list(text).map_err(lib)?;
        env.reset_scripted(ops).map_err(lib)?;
        Ok(())
    })
}

/// Applies action `action` (0..8). `out` may be null.
///
/// # Safety
/// `h` must be a live environment handle; `out` null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn abacus_env_step(h: *mut AbacusEnvHandle, action: u32, out: *mut AbacusStepOut) -> AbacusStatus {
    guard(|| {
        let env = env_mut(h)?;
        let a = Action::from_index(action as usize).ok_or_else(|| (AbacusStatus::InvalidArgument, format!("unknown action {action}")))?;
        let r = env.step(a).map_err(lib)?;
        if let Some(o) = out.as_mut() {
            *o = AbacusStepOut {
                reward: r.reward,
                done: r.done as u8,
                cause: r.info.cause.map_or(-1, cause_code),
                operations_completed: r.info.operations_completed,
                budget_remaining: r.info.budget_remaining,
            };
        }
        Ok(())
    })
}

/// Writes the stacked observation (oldest frame first) into `buf`, which
/// must hold at least [`abacus_observation_len`] floats.
///
/// # Safety
/// `h` must be a live environment handle and `buf` valid for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn abacus_env_observe(h: *mut AbacusEnvHandle, buf: *mut f32, len: usize) -> AbacusStatus {
    guard(|| {
        let env = env_mut(h)?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < OBS_FLAT_LEN {
            return Err((AbacusStatus::BufferTooSmall, format!("need {OBS_FLAT_LEN} floats")));
        }
        env.observation().write_flat(std::slice::from_raw_parts_mut(buf, OBS_FLAT_LEN));
        Ok(())
    })
}

/// Writes the 9-float symbol encoding into `buf`.
///
/// # Safety
/// `h` must be a live environment handle and `buf` valid for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn abacus_env_symbol(h: *mut AbacusEnvHandle, buf: *mut f32, len: usize) -> AbacusStatus {
    guard(|| {
        let env = env_mut(h)?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < SYMBOL_LEN {
            return Err((AbacusStatus::BufferTooSmall, format!("need {SYMBOL_LEN} floats")));
        }
        std::slice::from_raw_parts_mut(buf, SYMBOL_LEN).copy_from_slice(&env.symbol_input().0);
        Ok(())
    })
}

/// Writes 8 bytes, 1 for each legal action.
///
/// # Safety
/// `h` must be a live environment handle and `buf` valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn abacus_env_mask(h: *mut AbacusEnvHandle, buf: *mut u8, len: usize) -> AbacusStatus {
    guard(|| {
        let env = env_mut(h)?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < NUM_ACTIONS {
            return Err((AbacusStatus::BufferTooSmall, format!("need {NUM_ACTIONS} bytes")));
        }
        let out = std::slice::from_raw_parts_mut(buf, NUM_ACTIONS);
        for (o, m) in out.iter_mut().zip(env.mask().0) {
            *o = m as u8;
        }
        Ok(())
    })
}

/// The scripted solver's next action.
///
/// # Safety
/// `h` must be a live environment handle and `action` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn abacus_env_prescription(h: *mut AbacusEnvHandle, action: *mut u32) -> AbacusStatus {
    guard(|| {
        let env = env_mut(h)?;
        if action.is_null() {
            return Err(null("action"));
        }
        if env.is_done() {
            return Err(lib(Error::EpisodeFinished));
        }
        *action = env.prescription().map_err(lib)?.action.index() as u32;
        Ok(())
    })
}

/// Board value as a NUL-terminated decimal string. Writes the full length
/// (excluding the NUL) to `needed`; fails with `BufferTooSmall` if `len`
/// cannot hold it.
///
/// # Safety
/// `h` must be a live environment handle, `buf` valid for `len` bytes and
/// `needed` null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn abacus_env_value(h: *mut AbacusEnvHandle, buf: *mut c_char, len: usize, needed: *mut usize) -> AbacusStatus {
    guard(|| {
        let env = env_mut(h)?;
        let s = env.state().value().to_string();
        if let Some(n) = needed.as_mut() {
            *n = s.len();
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < s.len() + 1 {
            return Err((AbacusStatus::BufferTooSmall, format!("need {} bytes", s.len() + 1)));
        }
        ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
        *buf.add(s.len()) = 0;
        Ok(())
    })
}

/// Loads a trained policy from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn abacus_policy_load(path: *const c_char, greedy: u8, seed: u64, out: *mut *mut AbacusPolicyHandle) -> AbacusStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (AbacusStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let ck = load_checkpoint(Path::new(p)).map_err(lib)?;
        let policy = NetPolicy::new(Arc::new(ck.params), greedy != 0, seed);
        *out = Box::into_raw(Box::new(AbacusPolicyHandle { policy }));
        Ok(())
    })
}

/// Releases a policy. Null is ignored.
///
/// # Safety
/// `h` must come from [`abacus_policy_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn abacus_policy_free(h: *mut AbacusPolicyHandle) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Picks an action for the environment's current state. `prev_action` is
/// the previous action of this episode, or -1 on its first step.
///
/// # Safety
/// Both handles must be live and `action` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn abacus_policy_act(
    p: *mut AbacusPolicyHandle,
    h: *mut AbacusEnvHandle,
    prev_action: i32,
    action: *mut u32,
) -> AbacusStatus {
    guard(|| {
        let policy = &mut p.as_mut().ok_or_else(|| null("policy"))?.policy;
        let env = env_mut(h)?;
        if action.is_null() {
            return Err(null("action"));
        }
        let prev = match prev_action {
            -1 => None,
            i => Some(
                usize::try_from(i)
                    .ok()
                    .and_then(Action::from_index)
                    .ok_or_else(|| (AbacusStatus::InvalidArgument, format!("unknown previous action {i}")))?,
            ),
        };
        let a = policy.act(&[&*env], &[prev]).map_err(lib)?[0];
        *action = a.index() as u32;
        Ok(())
    })
}
