//! Torso-arm coordination modes.
//!
//! Every mode maps one operator [`ControlFrame`] plus the robot state to a
//! [`CommandSet`]: a torso position target and an arm target expressed in
//! the torso frame (relative to the arm mount). How the arm target is turned
//! into a world goal depends on [`Mode::anchors_world`]:
//!
//! * manual modes (V, PH) carry the arm rigidly with the executed torso;
//! * the other modes hold the world goal at `mount(torso_target) + arm_target`
//!   so that a compensated torso move leaves the commanded world height
//!   unchanged while the torso is still travelling.
//!
//! Torso deltas are always added to the previous torso *target*, never to
//! the lagging measured torso position.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ik::{best_effort, solve_integrated_ik, IkError, IkState, IkWeights};
use crate::kinematics::{JointVector, Pose, RobotModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoordinationError {
    #[error("scaling mode needs workspace calibration origins")]
    CalibrationMissing,
    #[error("no torso schedule entry for leg {0}")]
    ScheduleMissing(usize),
    #[error("invalid mode configuration: {0}")]
    InvalidConfig(String),
    #[error("step called for mode {found} with a {expected} configuration")]
    WrongMode { expected: Mode, found: Mode },
    #[error("integrated IK failed: {0}")]
    Ik(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    V,
    PH,
    P,
    S,
    C,
    TB,
    RIK,
}

impl Mode {
    pub const ALL: [Mode; 7] = [Mode::V, Mode::PH, Mode::P, Mode::S, Mode::C, Mode::TB, Mode::RIK];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::V => "V",
            Mode::PH => "PH",
            Mode::P => "P",
            Mode::S => "S",
            Mode::C => "C",
            Mode::TB => "TB",
            Mode::RIK => "RIK",
        }
    }

    /// Modes in which the operator drives the torso directly.
    pub fn is_manual(&self) -> bool {
        matches!(self, Mode::V | Mode::PH)
    }

    /// Whether the arm target is held against the commanded torso position
    /// (world-anchored) rather than riding on the executed torso.
    pub fn anchors_world(&self) -> bool {
        !self.is_manual()
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown mode '{s}' (expected one of V, PH, P, S, C, TB, RIK)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum JoystickEdge {
    Up,
    Down,
    #[default]
    None,
}

/// One tick of operator input. Missing fields deserialize to the idle value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlFrame {
    pub t: f64,
    /// Clutched hand displacement this tick, m.
    pub hand_delta: [f64; 3],
    /// Absolute hand position in the operator's workspace, m.
    pub hand_pos_abs: [f64; 3],
    pub joystick_y: f64,
    pub joystick_edge: JoystickEdge,
    pub confirm_pressed: bool,
    pub clutch_held: bool,
}

impl Default for ControlFrame {
    fn default() -> Self {
        ControlFrame::idle(0.0)
    }
}

impl ControlFrame {
    pub fn idle(t: f64) -> Self {
        ControlFrame {
            t,
            hand_delta: [0.0; 3],
            hand_pos_abs: [0.0; 3],
            joystick_y: 0.0,
            joystick_edge: JoystickEdge::None,
            confirm_pressed: false,
            clutch_held: false,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.t.is_finite() {
            return Err("frame time is not finite".into());
        }
        if !self.joystick_y.is_finite() || self.joystick_y.abs() > 1.0 {
            return Err(format!("joystick_y {} outside [-1, 1]", self.joystick_y));
        }
        if self.hand_delta.iter().chain(&self.hand_pos_abs).any(|v| !v.is_finite()) {
            return Err("hand input is not finite".into());
        }
        Ok(())
    }
}

/// Workspace origins for the scaling mode: the hand height that maps to the
/// bottom of the robot's vertical range, and the torso / arm positions it
/// maps to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingCalibration {
    pub human_origin_z: f64,
    pub torso_origin: f64,
    pub arm_origin_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeConfig {
    pub mode: Mode,
    pub preset_heights: Vec<f64>,
    /// Lower / upper arm-z bounds in the torso frame for the proximity mode.
    pub envelope: [f64; 2],
    pub human_ws: f64,
    pub arm_ws: f64,
    pub torso_ws: f64,
    pub calibration: Option<ScalingCalibration>,
    /// Torso speed at full joystick deflection, m/s.
    pub torso_speed_gain: f64,
    /// Torso target per task leg (two legs per sub-task: pick, place).
    pub task_torso_schedule: Vec<f64>,
    pub debounce_s: f64,
    /// Accumulated arm-z change that triggers a chasing torso command, m.
    pub chasing_deadband: f64,
    pub torso_range: [f64; 2],
    /// Feasible arm-z range in the torso frame; compensation never leaves it.
    pub arm_z_range: [f64; 2],
    /// Control period, s.
    pub dt: f64,
}

impl ModeConfig {
    /// Default parameters for `mode`, derived from the robot model.
    pub fn new(model: &RobotModel, mode: Mode, dt: f64) -> Self {
        let (lo, hi) = model.torso_range();
        let reach = &model.spec().reach;
        let c = model.nominal_arm_center_z();
        let human_ws = 0.6;
        let torso_ws = hi - lo;
        let arm_ws = 0.8;
        ModeConfig {
            mode,
            preset_heights: model.spec().torso.preset_heights.clone(),
            envelope: [c - 0.2, c + 0.2],
            human_ws,
            arm_ws,
            torso_ws,
            calibration: None,
            torso_speed_gain: model.torso_velocity_limit(),
            task_torso_schedule: Vec::new(),
            debounce_s: 0.3,
            chasing_deadband: 0.005,
            torso_range: [lo, hi],
            arm_z_range: reach.arm_z_range,
            dt,
        }
    }

    pub fn torso_scale(&self) -> f64 {
        self.torso_ws / self.human_ws
    }

    pub fn arm_scale(&self) -> f64 {
        self.arm_ws / self.human_ws
    }

    pub fn validate(&self) -> Result<(), CoordinationError> {
        let bad = |m: String| Err(CoordinationError::InvalidConfig(m));
        let [tlo, thi] = self.torso_range;
        if self.preset_heights.is_empty() {
            return bad("preset_heights is empty".into());
        }
        if self.preset_heights.windows(2).any(|w| w[0] >= w[1]) {
            return bad("preset_heights must be strictly increasing".into());
        }
        if self.preset_heights.iter().any(|h| *h < tlo - 1e-12 || *h > thi + 1e-12) {
            return bad("preset height outside torso range".into());
        }
        if self.envelope[0] >= self.envelope[1] {
            return bad("envelope lower bound must be below upper bound".into());
        }
        if self.human_ws <= 0.0 || self.arm_ws < 0.0 || self.torso_ws < 0.0 {
            return bad("workspace extents must be positive".into());
        }
        if !(self.dt > 0.0) || self.torso_speed_gain < 0.0 || self.chasing_deadband < 0.0 {
            return bad("dt, gain and deadband must be non-negative (dt positive)".into());
        }
        if self.mode == Mode::TB && self.task_torso_schedule.is_empty() {
            return bad("task-based mode needs a torso schedule".into());
        }
        Ok(())
    }
}

/// Output of one coordination step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandSet {
    pub torso_target: f64,
    /// Arm target in the torso frame.
    pub arm_target: Pose,
    /// Torso delta commanded this tick and subtracted from the arm target.
    pub compensation_applied: f64,
    /// Compensated torso motion blocked by the arm range, retried next tick.
    pub compensation_pending: f64,
    /// Full joint target, set only by the integrated (RIK) mode.
    pub arm_joints: Option<JointVector>,
}

impl CommandSet {
    pub fn hold(torso_target: f64, arm_target: Pose) -> Self {
        CommandSet {
            torso_target,
            arm_target,
            compensation_applied: 0.0,
            compensation_pending: 0.0,
            arm_joints: None,
        }
    }
}

/// Executed joints plus the previous tick's commands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotState {
    pub joints: JointVector,
    pub command: CommandSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChasingState {
    pub arm_z_pos_prev: f64,
}

/// Lower the arm target by `delta_pos`; x, y and orientation are untouched.
pub fn compensate(delta_pos: f64, arm_target: &Pose) -> Pose {
    let mut p = *arm_target;
    p.position.z -= delta_pos;
    p
}

/// Index of the preset nearest to `torso_pos`; ties go to the lower index.
pub fn find_current_position_index(torso_pos: f64, cfg: &ModeConfig) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, h) in cfg.preset_heights.iter().enumerate() {
        let d = (torso_pos - h).abs();
        if d < best_d - 1e-12 {
            best = i;
            best_d = d;
        }
    }
    best
}

fn clamp_torso(z: f64, cfg: &ModeConfig) -> f64 {
    z.clamp(cfg.torso_range[0], cfg.torso_range[1])
}

fn with_hand(arm_target: &Pose, hand_delta: &[f64; 3]) -> Pose {
    arm_target.translated(Vector3::from(*hand_delta))
}

fn clamp_arm_z(p: Pose, cfg: &ModeConfig) -> Pose {
    let z = p.position.z.clamp(cfg.arm_z_range[0], cfg.arm_z_range[1]);
    p.with_z(z)
}

/// Result of a compensated torso request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Compensated {
    pub torso_target: f64,
    pub arm_target: Pose,
    /// Torso delta actually commanded (and subtracted from the arm).
    pub applied: f64,
    /// Part of the request blocked by the arm's feasible range.
    pub remainder: f64,
}

/// Move the torso target by `delta` and compensate the arm target. The move
/// is limited by the torso range (that part is dropped) and by the arm-z
/// range (that part is returned as `remainder`).
pub fn compensated_move(torso_target: f64, arm_target: &Pose, delta: f64, cfg: &ModeConfig) -> Compensated {
    let room = clamp_torso(torso_target + delta, cfg) - torso_target;
    let z = arm_target.position.z;
    let z_new = (z - room).clamp(cfg.arm_z_range[0].min(z), cfg.arm_z_range[1].max(z));
    let applied = z - z_new;
    Compensated {
        torso_target: clamp_torso(torso_target + applied, cfg),
        arm_target: compensate(applied, arm_target),
        applied,
        remainder: room - applied,
    }
}

/// Velocity mode: joystick drives the torso, the hand drives the arm 1:1.
pub fn step_velocity(frame: &ControlFrame, state: &RobotState, cfg: &ModeConfig) -> CommandSet {
    let prev = &state.command;
    let torso = clamp_torso(prev.torso_target + frame.joystick_y * cfg.torso_speed_gain * cfg.dt, cfg);
    CommandSet::hold(torso, clamp_arm_z(with_hand(&prev.arm_target, &frame.hand_delta), cfg))
}

/// Edge-triggered joystick state for the preset-heights mode.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PresetState {
    pub pos_ix: usize,
    pub last_edge_t: Option<f64>,
}

/// Preset-heights mode. Returns the command and the updated preset index.
pub fn step_preset_heights(
    frame: &ControlFrame,
    state: &RobotState,
    cfg: &ModeConfig,
    ps: PresetState,
) -> (CommandSet, PresetState) {
    let mut ps = ps;
    let debounced = ps.last_edge_t.is_none_or(|t0| frame.t - t0 >= cfg.debounce_s - 1e-9);
    let last = cfg.preset_heights.len() - 1;
    if frame.joystick_edge != JoystickEdge::None && debounced {
        let mut ix = find_current_position_index(state.joints.torso_pos, cfg);
        match frame.joystick_edge {
            JoystickEdge::Up if ix < last => ix += 1,
            JoystickEdge::Down if ix > 0 => ix -= 1,
            _ => {}
        }
        ps.pos_ix = ix;
        ps.last_edge_t = Some(frame.t);
    }
    let ix = ps.pos_ix.min(last);
    let torso = clamp_torso(cfg.preset_heights[ix], cfg);
    let arm = clamp_arm_z(with_hand(&state.command.arm_target, &frame.hand_delta), cfg);
    (CommandSet::hold(torso, arm), ps)
}

/// Proximity mode: the torso moves only when the arm leaves its envelope.
pub fn step_proximity(frame: &ControlFrame, state: &RobotState, cfg: &ModeConfig) -> CommandSet {
    let prev = &state.command;
    let arm = with_hand(&prev.arm_target, &frame.hand_delta);
    let arm_z = arm.position.z;
    let [lower, upper] = cfg.envelope;
    let delta = if arm_z >= upper {
        arm_z - upper
    } else if arm_z <= lower {
        -(lower - arm_z)
    } else {
        0.0
    };
    finish_compensated(prev, &arm, delta, cfg)
}

/// Issue `delta` plus any pending compensation from the previous tick.
fn finish_compensated(prev: &CommandSet, arm: &Pose, delta: f64, cfg: &ModeConfig) -> CommandSet {
    let total = delta + prev.compensation_pending;
    if total == 0.0 {
        return CommandSet::hold(prev.torso_target, clamp_arm_z(*arm, cfg));
    }
    let c = compensated_move(prev.torso_target, arm, total, cfg);
    CommandSet {
        torso_target: c.torso_target,
        arm_target: clamp_arm_z(c.arm_target, cfg),
        compensation_applied: c.applied,
        compensation_pending: c.remainder,
        arm_joints: None,
    }
}

/// Scaling mode: absolute vertical mapping of the hand onto torso and arm.
pub fn step_scaling(frame: &ControlFrame, state: &RobotState, cfg: &ModeConfig) -> Result<CommandSet, CoordinationError> {
    let cal = cfg.calibration.ok_or(CoordinationError::CalibrationMissing)?;
    let h = (frame.hand_pos_abs[2] - cal.human_origin_z).clamp(0.0, cfg.human_ws);
    let torso = clamp_torso(cal.torso_origin + h * cfg.torso_scale(), cfg);
    let arm_z = cal.arm_origin_z + h * cfg.arm_scale();
    let prev = &state.command;
    let horizontal = [frame.hand_delta[0], frame.hand_delta[1], 0.0];
    let arm = with_hand(&prev.arm_target, &horizontal).with_z(arm_z);
    Ok(CommandSet::hold(torso, clamp_arm_z(arm, cfg)))
}

/// Chasing mode: the torso follows the arm's vertical motion.
pub fn step_chasing(
    frame: &ControlFrame,
    state: &RobotState,
    cfg: &ModeConfig,
    cs: ChasingState,
) -> (CommandSet, ChasingState) {
    let prev = &state.command;
    let arm = with_hand(&prev.arm_target, &frame.hand_delta);
    let delta = arm.position.z - cs.arm_z_pos_prev;
    if delta == 0.0 || delta.abs() < cfg.chasing_deadband {
        return (finish_compensated(prev, &arm, 0.0, cfg), cs);
    }
    let cmd = finish_compensated(prev, &arm, delta, cfg);
    let cs = ChasingState {
        arm_z_pos_prev: cmd.arm_target.position.z,
    };
    (cmd, cs)
}

/// Task-based mode: torso targets come from the schedule at leg transitions.
pub fn step_task_based(
    frame: &ControlFrame,
    state: &RobotState,
    cfg: &ModeConfig,
    leg: usize,
    transition: bool,
) -> Result<CommandSet, CoordinationError> {
    let target = *cfg
        .task_torso_schedule
        .get(leg)
        .ok_or(CoordinationError::ScheduleMissing(leg))?;
    let prev = &state.command;
    let arm = with_hand(&prev.arm_target, &frame.hand_delta);
    let delta = if transition {
        clamp_torso(target, cfg) - prev.torso_target
    } else {
        0.0
    };
    Ok(finish_compensated(prev, &arm, delta, cfg))
}

/// Planner state of the integrated (RIK) mode: its own IK memory and the
/// last planned configuration, which the executed robot trails.
#[derive(Debug, Clone, PartialEq)]
pub struct RikPlanner {
    pub ik: IkState,
    pub plan: JointVector,
    /// World goal for the end effector.
    pub goal: Pose,
}

/// Integrated mode: the hand moves a world goal and the 8-DoF IK chooses
/// both torso and arm.
pub fn step_rik(
    frame: &ControlFrame,
    model: &RobotModel,
    cfg: &ModeConfig,
    planner: &mut RikPlanner,
    weights: &IkWeights,
) -> Result<CommandSet, CoordinationError> {
    let lo = model.base_height() + cfg.torso_range[0] + cfg.arm_z_range[0];
    let hi = model.base_height() + cfg.torso_range[1] + cfg.arm_z_range[1];
    let goal = with_hand(&planner.goal, &frame.hand_delta);
    planner.goal = goal.with_z(goal.position.z.clamp(lo, hi));
    let r = best_effort(solve_integrated_ik(model, &mut planner.ik, &planner.plan, &planner.goal, weights))
        .map_err(|e: IkError| CoordinationError::Ik(e.to_string()))?;
    planner.plan = r.solution;
    let torso = r.solution.torso_pos;
    let local = planner.goal.translated(Vector3::new(0.0, 0.0, -model.mount_z(torso)));
    Ok(CommandSet {
        torso_target: torso,
        arm_target: local,
        compensation_applied: 0.0,
        compensation_pending: 0.0,
        arm_joints: Some(r.solution),
    })
}

/// Per-session dispatcher holding all mode-local state.
#[derive(Debug, Clone, PartialEq)]
pub struct Coordinator {
    pub cfg: ModeConfig,
    pub preset: PresetState,
    pub chasing: ChasingState,
    pub last_leg: Option<usize>,
    pub rik: Option<RikPlanner>,
}

/// Mode-local state exposed to clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeLocalState {
    pub pos_ix: usize,
    pub arm_z_pos_prev: f64,
    pub planned_torso: Option<f64>,
}

impl Coordinator {
    pub fn new(cfg: ModeConfig, state: &RobotState) -> Result<Self, CoordinationError> {
        cfg.validate()?;
        let mut c = Coordinator {
            preset: PresetState::default(),
            chasing: ChasingState {
                arm_z_pos_prev: state.command.arm_target.position.z,
            },
            last_leg: None,
            rik: None,
            cfg,
        };
        c.preset.pos_ix = find_current_position_index(state.joints.torso_pos, &c.cfg);
        Ok(c)
    }

    pub fn mode(&self) -> Mode {
        self.cfg.mode
    }

    /// Switch mode mid-trial; mode-local state is re-seeded from `state`.
    pub fn switch_mode(&mut self, mode: Mode, state: &RobotState) {
        self.cfg.mode = mode;
        self.preset = PresetState {
            pos_ix: find_current_position_index(state.joints.torso_pos, &self.cfg),
            last_edge_t: None,
        };
        self.chasing.arm_z_pos_prev = state.command.arm_target.position.z;
        self.last_leg = None;
        self.rik = None;
    }

    pub fn local_state(&self) -> ModeLocalState {
        ModeLocalState {
            pos_ix: self.preset.pos_ix,
            arm_z_pos_prev: self.chasing.arm_z_pos_prev,
            planned_torso: self.rik.as_ref().map(|r| r.plan.torso_pos),
        }
    }

    /// Run one coordination step. `leg` is the current task leg, if any.
    pub fn step(
        &mut self,
        frame: &ControlFrame,
        state: &RobotState,
        leg: Option<usize>,
        model: &RobotModel,
        weights: &IkWeights,
    ) -> Result<CommandSet, CoordinationError> {
        let cfg = &self.cfg;
        let cmd = match cfg.mode {
            Mode::V => step_velocity(frame, state, cfg),
            Mode::PH => {
                let (c, ps) = step_preset_heights(frame, state, cfg, self.preset);
                self.preset = ps;
                c
            }
            Mode::P => step_proximity(frame, state, cfg),
            Mode::S => step_scaling(frame, state, cfg)?,
            Mode::C => {
                let (c, cs) = step_chasing(frame, state, cfg, self.chasing);
                self.chasing = cs;
                c
            }
            Mode::TB => match leg {
                Some(leg) => {
                    let transition = self.last_leg != Some(leg);
                    self.last_leg = Some(leg);
                    step_task_based(frame, state, cfg, leg, transition)?
                }
                None => {
                    let arm = with_hand(&state.command.arm_target, &frame.hand_delta);
                    CommandSet::hold(state.command.torso_target, clamp_arm_z(arm, cfg))
                }
            },
            Mode::RIK => {
                let planner = self.rik.get_or_insert_with(|| RikPlanner {
                    ik: IkState::default(),
                    plan: state.joints,
                    goal: state
                        .command
                        .arm_target
                        .translated(Vector3::new(0.0, 0.0, model.mount_z(state.command.torso_target))),
                });
                step_rik(frame, model, cfg, planner, weights)?
            }
        };
        Ok(cmd)
    }

    /// Re-seed tracking state after the robot moved without the operator
    /// (auto actions): chasing restarts from the current arm target and the
    /// integrated planner restarts from the executed joints.
    pub fn resync(&mut self, state: &RobotState) {
        self.chasing.arm_z_pos_prev = state.command.arm_target.position.z;
        self.rik = None;
    }
}
