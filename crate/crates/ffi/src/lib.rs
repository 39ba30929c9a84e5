//! C ABI over the trained artifacts: load a run's encoder and policy, build
//! tasks, step them, encode contexts and query actions.
//!
//! Every fallible function returns a [`GentleStatus`]; on failure the message
//! is available from [`gentle_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use gentle::datagen::Transition;
use gentle::envsuite::{env_step, initial_state, Family, TaskSpec};
use gentle::error::GentleError;
use gentle::numkit::Rng;
use gentle::offpolicy::ActorCritic;
use gentle::pipeline::load_run;
use gentle::tae::{ContextBatch, Latent, TaePair};

/// Result code of every fallible call. Codes 1 to 3 match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GentleStatus {
    Ok = 0,
    Runtime = 1,
    Config = 2,
    MissingInput = 3,
    NullPointer = 4,
    InvalidArgument = 5,
    Panic = 6,
}

/// Hidden parameters of one task plus its environment settings.
pub struct GentleTask {
    spec: TaskSpec,
}

/// Trained context encoder of a run.
pub struct GentleEncoder {
    family: Family,
    tae: TaePair,
}

/// Trained deterministic actor of a run.
pub struct GentlePolicy {
    policy: ActorCritic,
    state_dim: usize,
    action_dim: usize,
    latent_dim: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(GentleStatus, String);

impl From<GentleError> for Failure {
    fn from(e: GentleError) -> Self {
        let status = match e.exit_code() {
            2 => GentleStatus::Config,
            3 => GentleStatus::MissingInput,
            _ => GentleStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(GentleStatus::InvalidArgument, msg.into())
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GentleStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GentleStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            GentleStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(GentleStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure(GentleStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(Failure(GentleStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn expect_len(got: usize, want: usize, what: &str) -> Result<(), Failure> {
    if got == want {
        Ok(())
    } else {
        Err(invalid(format!("{what} has length {got}, expected {want}")))
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    let s = non_null(p, "path")?;
    let s = CStr::from_ptr(s).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(GentleStatus::NullPointer, "output handle pointer is null".into()));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gentle_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gentle_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

fn new_task(spec: TaskSpec, out: *mut *mut GentleTask) -> GentleStatus {
    guard(|| {
        spec.validate()?;
        unsafe { put(out, GentleTask { spec }) }
    })
}

/// PointRobot task with its goal in `[-1, 1]^2`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn gentle_task_new_point_robot(goal_x: f64, goal_y: f64, out: *mut *mut GentleTask) -> GentleStatus {
    new_task(TaskSpec::PointRobot { goal: [goal_x, goal_y] }, out)
}

/// PointMassParams task with damping and mass multipliers in `[1.5^-3, 1.5^3]`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn gentle_task_new_point_mass_params(damping_mult: f64, mass_mult: f64, out: *mut *mut GentleTask) -> GentleStatus {
    new_task(TaskSpec::PointMassParams { damping_mult, mass_mult }, out)
}

/// # Safety
/// `task` must be NULL or a handle from a `gentle_task_new_*` call, freed once.
#[no_mangle]
pub unsafe extern "C" fn gentle_task_free(task: *mut GentleTask) {
    if !task.is_null() {
        drop(Box::from_raw(task));
    }
}

/// # Safety
/// `task` must be NULL or a live task handle.
#[no_mangle]
pub unsafe extern "C" fn gentle_task_state_dim(task: *const GentleTask) -> usize {
    task.as_ref().map_or(0, |t| t.spec.family().state_dim())
}

/// # Safety
/// `task` must be NULL or a live task handle.
#[no_mangle]
pub unsafe extern "C" fn gentle_task_action_dim(task: *const GentleTask) -> usize {
    task.as_ref().map_or(0, |t| t.spec.family().action_dim())
}

/// Episode length in steps.
///
/// # Safety
/// `task` must be NULL or a live task handle.
#[no_mangle]
pub unsafe extern "C" fn gentle_task_horizon(task: *const GentleTask) -> usize {
    task.as_ref().map_or(0, |t| t.spec.family().config().horizon)
}

/// Draws an initial state from the family's start distribution.
///
/// # Safety
/// `task` must be a live handle; `state_out` must point to `state_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn gentle_task_reset(task: *const GentleTask, seed: u64, state_out: *mut f64, state_len: usize) -> GentleStatus {
    guard(|| {
        let t = non_null(task, "task")?;
        let family = t.spec.family();
        expect_len(state_len, family.state_dim(), "state_out")?;
        let s = initial_state(family, &mut Rng::new(seed));
        slice_mut(state_out, state_len, "state_out")?.copy_from_slice(&s);
        Ok(())
    })
}

/// One environment step; actions outside the bound are clipped.
///
/// # Safety
/// Pointers must reference arrays of the stated lengths; `reward_out` one writable double.
#[no_mangle]
pub unsafe extern "C" fn gentle_task_step(
    task: *const GentleTask,
    state: *const f64,
    state_len: usize,
    action: *const f64,
    action_len: usize,
    next_state_out: *mut f64,
    reward_out: *mut f64,
) -> GentleStatus {
    guard(|| {
        let t = non_null(task, "task")?;
        let family = t.spec.family();
        expect_len(state_len, family.state_dim(), "state")?;
        expect_len(action_len, family.action_dim(), "action")?;
        let (next, r) = env_step(&t.spec, slice(state, state_len, "state")?, slice(action, action_len, "action")?)?;
        slice_mut(next_state_out, state_len, "next_state_out")?.copy_from_slice(&next);
        if reward_out.is_null() {
            return Err(Failure(GentleStatus::NullPointer, "reward_out is null".into()));
        }
        *reward_out = r;
        Ok(())
    })
}

/// Loads the encoder of a `train` output directory.
///
/// # Safety
/// `run_dir` must be a NUL-terminated string; `out` valid storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn gentle_encoder_load(run_dir: *const c_char, out: *mut *mut GentleEncoder) -> GentleStatus {
    guard(|| {
        let run = load_run(&path_arg(run_dir)?)?;
        put(
            out,
            GentleEncoder {
                family: run.config.family,
                tae: run.tae,
            },
        )
    })
}

/// # Safety
/// `encoder` must be NULL or a handle from `gentle_encoder_load`, freed once.
#[no_mangle]
pub unsafe extern "C" fn gentle_encoder_free(encoder: *mut GentleEncoder) {
    if !encoder.is_null() {
        drop(Box::from_raw(encoder));
    }
}

/// # Safety
/// `encoder` must be NULL or a live encoder handle.
#[no_mangle]
pub unsafe extern "C" fn gentle_encoder_latent_dim(encoder: *const GentleEncoder) -> usize {
    encoder.as_ref().map_or(0, |e| e.tae.latent_dim())
}

/// Encodes `n` transitions into a task latent. `states`, `next_states` are
/// row-major `n x state_dim`, `actions` is `n x action_dim`, `rewards` has
/// `n` entries. `n = 0` yields the zero prior.
///
/// # Safety
/// Arrays must hold the sizes above; `z_out` must point to `z_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn gentle_encoder_encode(
    encoder: *const GentleEncoder,
    states: *const f64,
    actions: *const f64,
    next_states: *const f64,
    rewards: *const f64,
    n: usize,
    z_out: *mut f64,
    z_len: usize,
) -> GentleStatus {
    guard(|| {
        let e = non_null(encoder, "encoder")?;
        let (sd, ad) = (e.family.state_dim(), e.family.action_dim());
        expect_len(z_len, e.tae.latent_dim(), "z_out")?;
        let s = slice(states, n * sd, "states")?;
        let a = slice(actions, n * ad, "actions")?;
        let s2 = slice(next_states, n * sd, "next_states")?;
        let r = slice(rewards, n, "rewards")?;
        let transitions: Vec<Transition> = (0..n)
            .map(|k| Transition {
                s: s[k * sd..(k + 1) * sd].to_vec(),
                a: a[k * ad..(k + 1) * ad].to_vec(),
                s_next: s2[k * sd..(k + 1) * sd].to_vec(),
                r: r[k],
                traj: 0,
                step: k,
            })
            .collect();
        let z = e.tae.encode(&ContextBatch::from_transitions(e.family, &transitions))?;
        slice_mut(z_out, z_len, "z_out")?.copy_from_slice(z.as_slice());
        Ok(())
    })
}

/// Loads the actor of a `train` output directory.
///
/// # Safety
/// `run_dir` must be a NUL-terminated string; `out` valid storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn gentle_policy_load(run_dir: *const c_char, out: *mut *mut GentlePolicy) -> GentleStatus {
    guard(|| {
        let run = load_run(&path_arg(run_dir)?)?;
        let family = run.config.family;
        put(
            out,
            GentlePolicy {
                policy: run.policy,
                state_dim: family.state_dim(),
                action_dim: family.action_dim(),
                latent_dim: run.config.latent_dim,
            },
        )
    })
}

/// # Safety
/// `policy` must be NULL or a handle from `gentle_policy_load`, freed once.
#[no_mangle]
pub unsafe extern "C" fn gentle_policy_free(policy: *mut GentlePolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// # Safety
/// `policy` must be NULL or a live policy handle.
#[no_mangle]
pub unsafe extern "C" fn gentle_policy_state_dim(policy: *const GentlePolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.state_dim)
}

/// # Safety
/// `policy` must be NULL or a live policy handle.
#[no_mangle]
pub unsafe extern "C" fn gentle_policy_action_dim(policy: *const GentlePolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.action_dim)
}

/// # Safety
/// `policy` must be NULL or a live policy handle.
#[no_mangle]
pub unsafe extern "C" fn gentle_policy_latent_dim(policy: *const GentlePolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.latent_dim)
}

/// Deterministic action for `state` under task latent `z`.
///
/// # Safety
/// Pointers must reference arrays of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn gentle_policy_act(
    policy: *const GentlePolicy,
    state: *const f64,
    state_len: usize,
    z: *const f64,
    z_len: usize,
    action_out: *mut f64,
    action_len: usize,
) -> GentleStatus {
    guard(|| {
        let p = non_null(policy, "policy")?;
        expect_len(state_len, p.state_dim, "state")?;
        expect_len(z_len, p.latent_dim, "z")?;
        expect_len(action_len, p.action_dim, "action_out")?;
        let z = Latent(slice(z, z_len, "z")?.to_vec());
        let a = p.policy.act(slice(state, state_len, "state")?, &z)?;
        slice_mut(action_out, action_len, "action_out")?.copy_from_slice(&a);
        Ok(())
    })
}
