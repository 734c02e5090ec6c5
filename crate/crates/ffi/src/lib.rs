//! C ABI over the highway simulator, transition datasets and trained policies.
//!
//! Every function returns an [`MdStatus`]. On failure a message is stored per
//! thread and can be read with [`md_last_error`]. Handles are opaque and must
//! be released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mopdrive::datasets::Dataset;
use mopdrive::mop_policy::QNet;
use mopdrive::sim::{EnvConfig, Highway, MetaAction, Observation, SimError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    EpisodeDone = 4,
    BufferTooSmall = 5,
    Internal = 99,
}

/// Simulator instance.
pub struct MdEnv {
    sim: Highway,
}

/// Loaded Q-network checkpoint.
pub struct MdPolicy {
    net: QNet,
}

/// Loaded transition dataset.
pub struct MdDataset {
    data: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(MdStatus, String);

type FfiResult = Result<(), Failure>;

fn fail(status: MdStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult) -> MdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MdStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            MdStatus::Internal
        }
    }
}

fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(MdStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: caller passes a NUL-terminated string that outlives the call.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| fail(MdStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: non-null pointers from the caller point to writable storage.
    unsafe { p.as_mut() }.ok_or_else(|| fail(MdStatus::NullPointer, format!("{what} is null")))
}

fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: handles are only created by this library and freed by the caller once.
    unsafe { p.as_ref() }.ok_or_else(|| fail(MdStatus::NullPointer, format!("{what} is null")))
}

fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    out_ref(p, what)
}

fn buffer<'a>(p: *mut f64, len: usize, needed: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(fail(MdStatus::NullPointer, format!("{what} is null")));
    }
    if len < needed {
        return Err(fail(MdStatus::BufferTooSmall, format!("{what} holds {len} values, {needed} needed")));
    }
    // SAFETY: caller guarantees `p` points to at least `len` writable doubles.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, needed) })
}

fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(fail(MdStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: caller guarantees `p` points to `len` readable doubles.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn write_obs(obs: &Observation, out: *mut f64, len: usize) -> FfiResult {
    buffer(out, len, obs.data().len(), "observation buffer")?.copy_from_slice(obs.data());
    Ok(())
}

fn invalid<E: std::fmt::Display>(e: E) -> Failure {
    fail(MdStatus::InvalidArgument, e.to_string())
}

/// Copies the last error message of this thread into `buf` (NUL-terminated).
/// `needed` receives the required capacity including the terminator; it is 0
/// when no error was recorded.
///
/// # Safety
/// Pointer arguments must be null or valid for the access described above;
/// handles must come from the matching constructor and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn md_last_error(buf: *mut c_char, cap: usize, needed: *mut usize) -> MdStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    let bytes = msg.as_ref().map_or(&[0u8][..], |m| m.as_bytes_with_nul());
    // SAFETY: `needed` is null or points to a writable size_t.
    if let Some(n) = unsafe { needed.as_mut() } {
        *n = if msg.is_some() { bytes.len() } else { 0 };
    }
    if buf.is_null() {
        return MdStatus::NullPointer;
    }
    if cap < bytes.len() {
        return MdStatus::BufferTooSmall;
    }
    // SAFETY: `buf` has room for `cap >= bytes.len()` bytes.
    unsafe { std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, bytes.len()) };
    MdStatus::Ok
}

/// Static NUL-terminated version string.
#[no_mangle]
pub extern "C" fn md_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a simulator for an id such as `lane-3-density-2`, reset with `seed`.
///
/// # Safety
/// Pointer arguments must be null or valid for the access described above;
/// handles must come from the matching constructor and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn md_env_new(env_id: *const c_char, seed: u64, out: *mut *mut MdEnv) -> MdStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let cfg = EnvConfig::from_id(str_arg(env_id, "env_id")?).map_err(invalid)?;
        let sim = Highway::new(cfg, seed).map_err(invalid)?;
        *out = Box::into_raw(Box::new(MdEnv { sim }));
        Ok(())
    })
}

/// # Safety
/// Pointer arguments must be null or valid for the access described above;
/// handles must come from the matching constructor and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn md_env_free(env: *mut MdEnv) {
    if !env.is_null() {
        // SAFETY: created by md_env_new and not freed before.
        drop(unsafe { Box::from_raw(env) });
    }
}

/// Number of doubles in one observation (vehicles × features).
///
/// # Safety
/// Pointer arguments must be null or valid for the access described above;
/// handles must come from the matching constructor and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn md_env_obs_len(env: *const MdEnv, out: *mut usize) -> MdStatus {
    guard(|| {
        *out_ref(out, "out")? = handle(env, "env")?.sim.observe().data().len();
        Ok(())
    })
}

/// Starts a new episode and writes its first observation.
///
/// # Safety
/// Pointer arguments must be null or valid for the access described above;
/// handles must come from the matching constructor and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn md_env_reset(env: *mut MdEnv, seed: u64, obs: *mut f64, len: usize) -> MdStatus {
    guard(|| {
        let env = handle_mut(env, "env")?;
        let needed = env.sim.observe().data().len();
        buffer(obs, len, needed, "observation buffer")?;
        write_obs(&env.sim.reset(seed), obs, len)
    })
}

/// Current observation without stepping.
///
/// # Safety
/// Pointer arguments must be null or valid for the access described above;
/// handles must come from the matching constructor and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn md_env_observe(env: *const MdEnv, obs: *mut f64, len: usize) -> MdStatus {
    guard(|| write_obs(&handle(env, "env")?.sim.observe(), obs, len))
}

/// Applies meta-action `action` (0 lane_left, 1 idle, 2 lane_right, 3 faster,
/// 4 slower). Returns `EpisodeDone` without stepping once the episode ended.
///
/// # Safety
/// Pointer arguments must be null or valid for the access described above;
/// handles must come from the matching constructor and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn md_env_step(
    env: *mut MdEnv,
    action: u32,
    obs: *mut f64,
    len: usize,
    reward: *mut f64,
    done: *mut bool,
) -> MdStatus {
    guard(|| {
        let env = handle_mut(env, "env")?;
        let action = MetaAction::from_index(action as usize)
            .ok_or_else(|| fail(MdStatus::InvalidArgument, format!("action {action} outside 0..5")))?;
        let (reward, done) = (out_ref(reward, "reward")?, out_ref(done, "done")?);
        buffer(obs, len, env.sim.observe().data().len(), "observation buffer")?;
        let step = env.sim.step(action).map_err(|e| match e {
            SimError::EpisodeDone => fail(MdStatus::EpisodeDone, e.to_string()),
            other => invalid(other),
        })?;
        *reward = step.reward;
        *done = step.done;
        write_obs(&step.observation, obs, len)
    })
}

/// Loads a checkpoint written by the trainer.
///
/// # Safety
/// Pointer arguments must be null or valid for the access described above;
/// handles must come from the matching constructor and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn md_policy_load(path: *const c_char, out: *mut *mut MdPolicy) -> MdStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let path = Path::new(str_arg(path, "path")?);
        if !path.is_file() {
            return Err(fail(MdStatus::Io, format!("{} does not exist", path.display())));
        }
        let net = QNet::load(path).map_err(|e| fail(MdStatus::Io, e.to_string()))?;
        *out = Box::into_raw(Box::new(MdPolicy { net }));
        Ok(())
    })
}

/// # Safety
/// Pointer arguments must be null or valid for the access described above;
/// handles must come from the matching constructor and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn md_policy_free(policy: *mut MdPolicy) {
    if !policy.is_null() {
        // SAFETY: created by md_policy_load and not freed before.
        drop(unsafe { Box::from_raw(policy) });
    }
}

fn policy_obs(p: &MdPolicy, obs: *const f64, len: usize) -> Result<Observation, Failure> {
    let v = p.net.vehicles();
    Observation::from_flat(v, input(obs, len, "observation")?.to_vec())
        .ok_or_else(|| fail(MdStatus::InvalidArgument, format!("observation has {len} values, policy expects {}", v * 5)))
}

/// Q-values of one observation; `q` must hold at least 5 doubles.
///
/// # Safety
/// Pointer arguments must be null or valid for the access described above;
/// handles must come from the matching constructor and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn md_policy_q_values(
    policy: *const MdPolicy,
    obs: *const f64,
    len: usize,
    q: *mut f64,
    q_len: usize,
) -> MdStatus {
    guard(|| {
        let p = handle(policy, "policy")?;
        let o = policy_obs(p, obs, len)?;
        let values = p.net.q_values(&[&o]).map_err(invalid)?;
        buffer(q, q_len, values.len(), "q buffer")?.copy_from_slice(values.data());
        Ok(())
    })
}

/// Greedy action of one observation.
///
/// # Safety
/// Pointer arguments must be null or valid for the access described above;
/// handles must come from the matching constructor and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn md_policy_act(policy: *const MdPolicy, obs: *const f64, len: usize, action: *mut u32) -> MdStatus {
    guard(|| {
        let p = handle(policy, "policy")?;
        let o = policy_obs(p, obs, len)?;
        let out = out_ref(action, "action")?;
        *out = p.net.greedy_actions(&[&o]).map_err(invalid)?[0] as u32;
        Ok(())
    })
}

/// Loads and verifies a dataset file.
///
/// # Safety
/// Pointer arguments must be null or valid for the access described above;
/// handles must come from the matching constructor and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn md_dataset_load(path: *const c_char, out: *mut *mut MdDataset) -> MdStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let path = Path::new(str_arg(path, "path")?);
        let data = Dataset::load(path).map_err(|e| fail(MdStatus::Io, e.to_string()))?;
        *out = Box::into_raw(Box::new(MdDataset { data }));
        Ok(())
    })
}

/// # Safety
/// Pointer arguments must be null or valid for the access described above;
/// handles must come from the matching constructor and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn md_dataset_free(dataset: *mut MdDataset) {
    if !dataset.is_null() {
        // SAFETY: created by md_dataset_load and not freed before.
        drop(unsafe { Box::from_raw(dataset) });
    }
}

/// # Safety
/// Pointer arguments must be null or valid for the access described above;
/// handles must come from the matching constructor and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn md_dataset_len(dataset: *const MdDataset, out: *mut usize) -> MdStatus {
    guard(|| {
        *out_ref(out, "out")? = handle(dataset, "dataset")?.data.len();
        Ok(())
    })
}

/// Copies transition `index`: state and next state into buffers of `len`
/// doubles each, plus action, reward and terminal flag.
///
/// # Safety
/// Pointer arguments must be null or valid for the access described above;
/// handles must come from the matching constructor and not be freed yet.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn md_dataset_get(
    dataset: *const MdDataset,
    index: usize,
    s: *mut f64,
    s_next: *mut f64,
    len: usize,
    action: *mut u32,
    reward: *mut f64,
    done: *mut bool,
) -> MdStatus {
    guard(|| {
        let d = &handle(dataset, "dataset")?.data;
        let t = d
            .transitions
            .get(index)
            .ok_or_else(|| fail(MdStatus::InvalidArgument, format!("index {index} outside 0..{}", d.len())))?;
        let (a, r, dn) = (out_ref(action, "action")?, out_ref(reward, "reward")?, out_ref(done, "done")?);
        write_obs(&t.s, s, len)?;
        write_obs(&t.s_next, s_next, len)?;
        *a = t.a as u32;
        *r = t.r;
        *dn = t.done;
        Ok(())
    })
}
