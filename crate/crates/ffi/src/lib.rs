//! C ABI over the simulator. Worlds are opaque handles, every call returns
//! a [`RelaynetCode`], and the message of the last failure on the calling
//! thread is available from [`relaynet_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use relaynet::channel::ChannelParams;
use relaynet::config::ExperimentConfig;
use relaynet::env::{FailureKind, TerminationStatus};
use relaynet::grid::{Action, Move};
use relaynet::sim::Simulator;

#[repr(i32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelaynetCode {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Runtime = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

#[repr(i32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelaynetStatus {
    Running = 0,
    Success = 1,
    Timeout = 2,
    Stalled = 3,
}

impl From<TerminationStatus> for RelaynetStatus {
    fn from(s: TerminationStatus) -> Self {
        match s {
            TerminationStatus::Running => RelaynetStatus::Running,
            TerminationStatus::Success => RelaynetStatus::Success,
            TerminationStatus::Failure(FailureKind::Timeout) => RelaynetStatus::Timeout,
            TerminationStatus::Failure(FailureKind::Stalled) => RelaynetStatus::Stalled,
        }
    }
}

/// Opaque simulator handle.
pub struct RelaynetWorld {
    sim: Simulator,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(code: RelaynetCode, msg: impl Into<String>) -> RelaynetCode {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    code
}

fn guard(f: impl FnOnce() -> RelaynetCode) -> RelaynetCode {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(RelaynetCode::Panic, "internal panic"))
}

/// Copies `s` plus a terminating NUL into `buf`. `out_len` (optional)
/// receives the required size including the NUL.
unsafe fn copy_out(s: &str, buf: *mut c_char, cap: usize, out_len: *mut usize) -> RelaynetCode {
    let need = s.len() + 1;
    if !out_len.is_null() {
        *out_len = need;
    }
    if buf.is_null() || cap < need {
        return RelaynetCode::BufferTooSmall;
    }
    ptr::copy_nonoverlapping(s.as_ptr(), buf.cast::<u8>(), s.len());
    *buf.add(s.len()) = 0;
    RelaynetCode::Ok
}

/// Creates a world. `config_toml` may be NULL for the built-in defaults.
///
/// # Safety
/// `config_toml` must be NULL or a NUL-terminated string; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn relaynet_world_new(
    config_toml: *const c_char,
    seed: u64,
    out: *mut *mut RelaynetWorld,
) -> RelaynetCode {
    guard(|| {
        if out.is_null() {
            return fail(RelaynetCode::NullPointer, "out is NULL");
        }
        *out = ptr::null_mut();
        let cfg = if config_toml.is_null() {
            ExperimentConfig::default()
        } else {
            let Ok(text) = CStr::from_ptr(config_toml).to_str() else {
                return fail(RelaynetCode::InvalidArgument, "config is not UTF-8");
            };
            match ExperimentConfig::from_toml_str(text) {
                Ok(c) => c,
                Err(e) => return fail(RelaynetCode::Config, e.to_string()),
            }
        };
        match Simulator::from_config(&cfg, seed) {
            Ok(sim) => {
                *out = Box::into_raw(Box::new(RelaynetWorld { sim }));
                RelaynetCode::Ok
            }
            Err(e) => fail(RelaynetCode::Runtime, e.to_string()),
        }
    })
}

/// Releases a world; NULL is ignored.
///
/// # Safety
/// `world` must be NULL or a handle from [`relaynet_world_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn relaynet_world_free(world: *mut RelaynetWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Number of agents currently deployed.
///
/// # Safety
/// `world` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn relaynet_world_agent_count(world: *const RelaynetWorld, out: *mut usize) -> RelaynetCode {
    guard(|| {
        if world.is_null() || out.is_null() {
            return fail(RelaynetCode::NullPointer, "world or out is NULL");
        }
        *out = (*world).sim.world.agents.len();
        RelaynetCode::Ok
    })
}

/// Advances one step. `moves[i]` is agent `i`'s move (0 up, 1 down, 2 left,
/// 3 right, 4 stay) and `requests[i]` nonzero asks for a new agent; `n`
/// must equal the agent count. `reward` and `status` are optional.
///
/// # Safety
/// `world` must be a live handle; `moves` and `requests` must point to `n`
/// bytes each.
#[no_mangle]
pub unsafe extern "C" fn relaynet_world_step(
    world: *mut RelaynetWorld,
    moves: *const u8,
    requests: *const u8,
    n: usize,
    reward: *mut f64,
    status: *mut RelaynetStatus,
) -> RelaynetCode {
    guard(|| {
        if world.is_null() || (n > 0 && (moves.is_null() || requests.is_null())) {
            return fail(RelaynetCode::NullPointer, "world, moves or requests is NULL");
        }
        let sim = &mut (*world).sim;
        if n != sim.world.agents.len() {
            return fail(RelaynetCode::InvalidArgument, format!("expected {} actions, got {n}", sim.world.agents.len()));
        }
        let (mv, rq) = if n == 0 {
            (&[][..], &[][..])
        } else {
            (std::slice::from_raw_parts(moves, n), std::slice::from_raw_parts(requests, n))
        };
        let mut actions = Vec::with_capacity(n);
        for (&m, &r) in mv.iter().zip(rq) {
            let Some(m) = Move::from_index(usize::from(m)) else {
                return fail(RelaynetCode::InvalidArgument, format!("move index {m} out of range"));
            };
            actions.push(Action::new(m, r != 0));
        }
        match sim.step(&actions) {
            Ok(rep) => {
                if !reward.is_null() {
                    *reward = rep.reward.global;
                }
                if !status.is_null() {
                    *status = rep.status.into();
                }
                RelaynetCode::Ok
            }
            Err(e) => fail(RelaynetCode::Runtime, e.to_string()),
        }
    })
}

/// Writes the world state as JSON. With `buf` NULL or too small, returns
/// `BufferTooSmall` and stores the required size in `out_len`.
///
/// # Safety
/// `world` must be a live handle; `buf` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn relaynet_world_snapshot(
    world: *const RelaynetWorld,
    buf: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> RelaynetCode {
    guard(|| {
        if world.is_null() {
            return fail(RelaynetCode::NullPointer, "world is NULL");
        }
        match copy_out(&(*world).sim.world.to_snapshot_json(), buf, cap, out_len) {
            RelaynetCode::BufferTooSmall => fail(RelaynetCode::BufferTooSmall, "snapshot buffer too small"),
            c => c,
        }
    })
}

/// Shannon capacity in bit/s of a link spanning `distance_m` metres under
/// the default channel.
///
/// # Safety
/// `out_bps` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn relaynet_channel_capacity(distance_m: f64, out_bps: *mut f64) -> RelaynetCode {
    guard(|| {
        if out_bps.is_null() {
            return fail(RelaynetCode::NullPointer, "out_bps is NULL");
        }
        if !distance_m.is_finite() {
            return fail(RelaynetCode::InvalidArgument, "distance must be finite");
        }
        match ChannelParams::default().capacity_at(distance_m) {
            Ok(c) => {
                *out_bps = c;
                RelaynetCode::Ok
            }
            Err(e) => fail(RelaynetCode::InvalidArgument, e.to_string()),
        }
    })
}

/// Message of the last failed call on this thread; empty if none. Does
/// not itself replace the message.
///
/// # Safety
/// `buf` must hold `cap` bytes; `out_len` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn relaynet_last_error(buf: *mut c_char, cap: usize, out_len: *mut usize) -> RelaynetCode {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    copy_out(&msg, buf, cap, out_len)
}
