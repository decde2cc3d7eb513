//! C ABI over the simulator. Every function returns a [`TacsimStatus`];
//! on failure [`tacsim_last_error`] describes the cause. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use tacsim::config::default_model;
use tacsim::coordination::{ControlFrame, JoystickEdge, Mode};
use tacsim::metrics::MetricsReport;
use tacsim::operator::{InputTrace, TraceMeta, TRACE_SCHEMA_VERSION};
use tacsim::sim::{run_trial, OperatorSource, Session, SessionConfig, SimError, StateSnapshot};
use tacsim::stats::kruskal_wallis;
use tacsim::task::Phase;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TacsimStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    SessionEnded = 4,
    Io = 5,
    Internal = 6,
}

/// Operator input for one tick. `joystick_edge`: 0 none, 1 up, -1 down.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TacsimControlFrame {
    pub hand_delta: [f64; 3],
    pub hand_pos_abs: [f64; 3],
    pub joystick_y: f64,
    pub joystick_edge: i32,
    pub confirm_pressed: bool,
    pub clutch_held: bool,
}

/// Task phase codes used in [`TacsimSnapshot::phase`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TacsimPhase {
    MovingToPick = 0,
    AwaitConfirmPick = 1,
    AutoPick = 2,
    MovingToPlace = 3,
    AwaitConfirmPlace = 4,
    AutoPlace = 5,
    Done = 6,
}

/// Fixed-size view of the robot and task state. The full state, including
/// events and container positions, is available as JSON.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TacsimSnapshot {
    pub t: f64,
    pub tick: u64,
    /// Torso position (m) followed by the seven arm joints (rad).
    pub joints: [f64; 8],
    pub ee_position: [f64; 3],
    /// Quaternion x, y, z, w.
    pub ee_orientation: [f64; 4],
    pub torso_command: f64,
    pub phase: TacsimPhase,
    pub task_index: u32,
    pub has_cue: bool,
    pub cue_target_id: u32,
    pub cue_position: [f64; 3],
    pub out_of_reach: bool,
    pub ended: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TacsimMetrics {
    pub total_time: f64,
    pub short_range_time: f64,
    pub long_range_time: f64,
    pub manipulability_mean: f64,
    pub manipulability_min: f64,
    pub torso_motion_time: f64,
    pub torso_motion_fraction: f64,
    pub wrong_selections: u32,
    pub completed_subtasks: u32,
    pub done: bool,
}

/// Opaque simulation session.
pub struct TacsimSession {
    session: Session,
    trace: InputTrace,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = s);
}

struct Fail(TacsimStatus, String);

impl From<SimError> for Fail {
    fn from(e: SimError) -> Self {
        let code = match e {
            SimError::Ended => TacsimStatus::SessionEnded,
            SimError::Config(_) | SimError::Coordination(_) => TacsimStatus::InvalidConfig,
            SimError::Trace(_) => TacsimStatus::Io,
            SimError::Stats(_) => TacsimStatus::InvalidArgument,
        };
        Fail(code, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TacsimStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TacsimStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            TacsimStatus::Internal
        }
    }
}

fn null() -> Fail {
    Fail(TacsimStatus::NullPointer, "null pointer argument".into())
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(TacsimStatus::InvalidArgument, "string is not UTF-8".into()))
}

unsafe fn mode_arg(p: *const c_char) -> Result<Mode, Fail> {
    str_arg(p)?.parse().map_err(|e: String| Fail(TacsimStatus::InvalidArgument, e))
}

unsafe fn out_ref<'a, T>(p: *mut T) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(null)
}

unsafe fn session_ref<'a>(p: *mut TacsimSession) -> Result<&'a mut TacsimSession, Fail> {
    p.as_mut().ok_or_else(null)
}

fn phase_code(p: Phase) -> TacsimPhase {
    match p {
        Phase::MovingToPick => TacsimPhase::MovingToPick,
        Phase::AwaitConfirmPick => TacsimPhase::AwaitConfirmPick,
        Phase::AutoPick => TacsimPhase::AutoPick,
        Phase::MovingToPlace => TacsimPhase::MovingToPlace,
        Phase::AwaitConfirmPlace => TacsimPhase::AwaitConfirmPlace,
        Phase::AutoPlace => TacsimPhase::AutoPlace,
        Phase::Done => TacsimPhase::Done,
    }
}

fn to_c_snapshot(s: &StateSnapshot) -> TacsimSnapshot {
    let mut joints = [0.0; 8];
    joints[0] = s.joints.torso_pos;
    joints[1..].copy_from_slice(&s.joints.arm_q);
    TacsimSnapshot {
        t: s.t,
        tick: s.tick,
        joints,
        ee_position: s.ee_position,
        ee_orientation: s.ee_orientation,
        torso_command: s.torso_command,
        phase: phase_code(s.phase),
        task_index: s.task_index as u32,
        has_cue: s.cue.is_some(),
        cue_target_id: s.cue.map_or(0, |c| c.target_id as u32),
        cue_position: s.cue.map_or([0.0; 3], |c| c.world_position),
        out_of_reach: s.cue.is_some_and(|c| c.out_of_reach),
        ended: s.ended,
    }
}

fn to_c_metrics(m: &MetricsReport) -> TacsimMetrics {
    TacsimMetrics {
        total_time: m.total_time,
        short_range_time: m.short_range_time,
        long_range_time: m.long_range_time,
        manipulability_mean: m.manipulability_mean,
        manipulability_min: m.manipulability_min,
        torso_motion_time: m.torso_motion_time,
        torso_motion_fraction: m.torso_motion_fraction,
        wrong_selections: m.wrong_selections,
        completed_subtasks: m.completed_subtasks as u32,
        done: m.done,
    }
}

fn from_c_frame(f: &TacsimControlFrame) -> Result<ControlFrame, Fail> {
    let joystick_edge = match f.joystick_edge {
        0 => JoystickEdge::None,
        1 => JoystickEdge::Up,
        -1 => JoystickEdge::Down,
        e => return Err(Fail(TacsimStatus::InvalidArgument, format!("joystick_edge {e} not in {{-1, 0, 1}}"))),
    };
    Ok(ControlFrame {
        t: 0.0,
        hand_delta: f.hand_delta,
        hand_pos_abs: f.hand_pos_abs,
        joystick_y: f.joystick_y,
        joystick_edge,
        confirm_pressed: f.confirm_pressed,
        clutch_held: f.clutch_held,
    })
}

fn json_out(value: &impl serde::Serialize, out: *mut *mut c_char) -> Result<(), Fail> {
    let text = serde_json::to_string(value).map_err(|e| Fail(TacsimStatus::Internal, e.to_string()))?;
    let c = CString::new(text).map_err(|e| Fail(TacsimStatus::Internal, e.to_string()))?;
    unsafe { *out_ref(out)? = c.into_raw() };
    Ok(())
}

/// Message describing the most recent failure on this thread. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tacsim_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tacsim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Create an interactive session with the built-in robot and task.
/// `mode` is one of "V", "PH", "P", "S", "C", "TB", "RIK"; `tick_hz` 50 or 100.
///
/// # Safety
/// `mode` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tacsim_session_new(
    mode: *const c_char,
    seed: u64,
    tick_hz: u32,
    out: *mut *mut TacsimSession,
) -> TacsimStatus {
    guard(|| {
        let out = out_ref(out)?;
        *out = ptr::null_mut();
        let model = default_model();
        let mut cfg = SessionConfig::new(&model, mode_arg(mode)?, seed);
        cfg.tick_hz = tick_hz;
        cfg.operator = OperatorSource::Interactive;
        let trace = InputTrace::new(TraceMeta {
            schema_version: TRACE_SCHEMA_VERSION,
            mode: cfg.mode,
            seed,
            tick_hz,
            operator: None,
        });
        let session = Session::new(model, cfg)?;
        *out = Box::into_raw(Box::new(TacsimSession { session, trace }));
        Ok(())
    })
}

/// Release a session. Null is ignored.
///
/// # Safety
/// `session` must come from [`tacsim_session_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tacsim_session_free(session: *mut TacsimSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Advance one tick with `frame`; `snapshot` may be null.
///
/// # Safety
/// Pointers must be valid; `snapshot` may be null.
#[no_mangle]
pub unsafe extern "C" fn tacsim_session_tick(
    session: *mut TacsimSession,
    frame: *const TacsimControlFrame,
    snapshot: *mut TacsimSnapshot,
) -> TacsimStatus {
    guard(|| {
        let s = session_ref(session)?;
        let mut f = from_c_frame(frame.as_ref().ok_or_else(null)?)?;
        f.t = s.session.time();
        if s.session.is_ended() {
            return Err(SimError::Ended.into());
        }
        s.trace.record(f);
        let snap = s.session.tick(&f)?;
        if let Some(out) = snapshot.as_mut() {
            *out = to_c_snapshot(&snap);
        }
        Ok(())
    })
}

/// Current state without advancing.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn tacsim_session_snapshot(session: *mut TacsimSession, snapshot: *mut TacsimSnapshot) -> TacsimStatus {
    guard(|| {
        let s = session_ref(session)?;
        *out_ref(snapshot)? = to_c_snapshot(&s.session.snapshot());
        Ok(())
    })
}

/// Full current state as JSON. Free the string with [`tacsim_string_free`].
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn tacsim_session_snapshot_json(session: *mut TacsimSession, out: *mut *mut c_char) -> TacsimStatus {
    guard(|| {
        let s = session_ref(session)?;
        json_out(&s.session.snapshot(), out)
    })
}

/// Switch coordination mode; applies from the next tick and is logged.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn tacsim_session_switch_mode(session: *mut TacsimSession, mode: *const c_char) -> TacsimStatus {
    guard(|| {
        let s = session_ref(session)?;
        let m = mode_arg(mode)?;
        if s.session.is_ended() {
            return Err(SimError::Ended.into());
        }
        s.session.switch_mode(m);
        Ok(())
    })
}

/// Metrics of the trial so far (partial until the task is done).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn tacsim_session_metrics(session: *mut TacsimSession, out: *mut TacsimMetrics) -> TacsimStatus {
    guard(|| {
        let s = session_ref(session)?;
        *out_ref(out)? = to_c_metrics(&s.session.running_metrics());
        Ok(())
    })
}

/// Write the trial log (gzip when the path ends in `.gz`) and, if
/// `trace_path` is not null, the input trace.
///
/// # Safety
/// `session` and `log_path` must be valid; `trace_path` may be null.
#[no_mangle]
pub unsafe extern "C" fn tacsim_session_save(
    session: *mut TacsimSession,
    log_path: *const c_char,
    trace_path: *const c_char,
) -> TacsimStatus {
    guard(|| {
        let s = session_ref(session)?;
        let log_path = PathBuf::from(str_arg(log_path)?);
        let io = |e: String| Fail(TacsimStatus::Io, e);
        s.session.log().save(&log_path).map_err(|e| io(e.to_string()))?;
        if !trace_path.is_null() {
            let p = PathBuf::from(str_arg(trace_path)?);
            s.trace.save(&p).map_err(|e| io(e.to_string()))?;
        }
        Ok(())
    })
}

/// Run one headless trial with the reference synthetic operator.
///
/// # Safety
/// `mode` must be a valid string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tacsim_run_trial(mode: *const c_char, seed: u64, tick_hz: u32, out: *mut TacsimMetrics) -> TacsimStatus {
    guard(|| {
        let out = out_ref(out)?;
        let model = default_model();
        let mut cfg = SessionConfig::new(&model, mode_arg(mode)?, seed);
        cfg.tick_hz = tick_hz;
        let outcome = run_trial(&model, &cfg)?;
        *out = to_c_metrics(&outcome.metrics);
        Ok(())
    })
}

/// Kruskal-Wallis test. `values` holds the groups back to back;
/// `group_sizes[i]` is the length of group `i`.
///
/// # Safety
/// `values` must hold the sum of `group_sizes` doubles; outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn tacsim_kruskal_wallis(
    values: *const f64,
    group_sizes: *const usize,
    n_groups: usize,
    h: *mut f64,
    p: *mut f64,
) -> TacsimStatus {
    guard(|| {
        if group_sizes.is_null() || (values.is_null() && n_groups > 0) {
            return Err(null());
        }
        let sizes = std::slice::from_raw_parts(group_sizes, n_groups);
        let total: usize = sizes.iter().sum();
        let all = if total == 0 { &[][..] } else { std::slice::from_raw_parts(values, total) };
        let mut groups = Vec::with_capacity(n_groups);
        let mut off = 0;
        for &n in sizes {
            groups.push(all[off..off + n].to_vec());
            off += n;
        }
        let r = kruskal_wallis(&groups).map_err(|e| Fail(TacsimStatus::InvalidArgument, e.to_string()))?;
        *out_ref(h)? = r.h;
        *out_ref(p)? = r.p;
        Ok(())
    })
}

/// Free a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tacsim_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
