//! Fixed-timestep simulation session, trial runner and batch driver.

use std::path::PathBuf;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordination::{
    CommandSet, ControlFrame, Coordinator, CoordinationError, Mode, ModeConfig, ModeLocalState, RobotState,
    ScalingCalibration,
};
use crate::ik::{best_effort, solve_arm_ik, IkState, IkWeights};
use crate::kinematics::{arm_jacobian, grasp_orientation, manipulability_index, JointVector, Pose, RobotModel, ARM_DOF};
use crate::metrics::{
    compute_metrics, LogEvent, MetricsReport, TickRecord, TrialLog, TrialMeta, TrialRow, LOG_SCHEMA_VERSION,
    TORSO_MOVING_EPS,
};
use crate::operator::{InputTrace, Observation, OperatorModel, SyntheticOperator, TraceError, TraceMeta, TRACE_SCHEMA_VERSION};
use crate::stats::{kruskal_wallis, median, StatTestResult, StatsError};
use crate::task::{
    advance, auto_pick_place, cue_for, AutoAction, Cue, Phase, ShelfSpec, TaskEvent, TaskScript, TaskState, TaskWorld,
    SUBTASK_COUNT,
};

/// Centre of the operator's hand workspace, m.
pub const HAND_CENTRE: [f64; 3] = [0.0, 0.0, 1.1];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid session config: {0}")]
    Config(String),
    #[error(transparent)]
    Coordination(#[from] CoordinationError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("session has ended")]
    Ended,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OperatorSource {
    Interactive,
    Synthetic(OperatorModel),
    Replay(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub tick_hz: u32,
    pub mode: Mode,
    /// Mode parameters; derived from the robot, shelf and script when absent.
    pub mode_config: Option<ModeConfig>,
    pub shelf: ShelfSpec,
    pub script: TaskScript,
    pub operator: OperatorSource,
    pub seed: u64,
    pub weights: IkWeights,
    /// Abort the trial when a sub-task makes no progress for this long, s.
    pub watchdog_s: f64,
    pub log_path: Option<PathBuf>,
}

impl SessionConfig {
    pub fn new(model: &RobotModel, mode: Mode, seed: u64) -> Self {
        let shelf = ShelfSpec::default();
        let script = crate::task::default_task_script(&shelf, model);
        SessionConfig {
            tick_hz: 100,
            mode,
            mode_config: None,
            shelf,
            script,
            operator: OperatorSource::Synthetic(OperatorModel {
                seed,
                ..OperatorModel::default()
            }),
            seed,
            weights: IkWeights::default(),
            watchdog_s: 60.0,
            log_path: None,
        }
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.tick_hz as f64
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.tick_hz != 50 && self.tick_hz != 100 {
            return Err(SimError::Config(format!("tick rate must be 50 or 100 Hz, got {}", self.tick_hz)));
        }
        self.shelf.validate().map_err(|e| SimError::Config(e.to_string()))?;
        self.script
            .validate(&self.shelf)
            .map_err(|e| SimError::Config(e.to_string()))?;
        self.weights.validate().map_err(SimError::Config)?;
        if let OperatorSource::Synthetic(m) = &self.operator {
            m.validate().map_err(SimError::Config)?;
        }
        if !(self.watchdog_s > 0.0) {
            return Err(SimError::Config("watchdog must be positive".into()));
        }
        Ok(())
    }
}

/// Scaling calibration that maps the hand's vertical range onto the span
/// from the lowest to the highest grasp height.
pub fn scaling_calibration(model: &RobotModel, shelf: &ShelfSpec) -> ScalingCalibration {
    let (lo, _) = model.torso_range();
    let bottom = shelf.levels[0] + shelf.grasp_height;
    ScalingCalibration {
        human_origin_z: HAND_CENTRE[2] - crate::operator::HAND_BOX[2],
        torso_origin: lo,
        arm_origin_z: bottom - model.base_height() - lo,
    }
}

/// Mode parameters for a session: model defaults plus the calibration and
/// torso schedule that depend on the task.
pub fn session_mode_config(model: &RobotModel, mode: Mode, dt: f64, shelf: &ShelfSpec, script: &TaskScript) -> ModeConfig {
    let mut c = ModeConfig::new(model, mode, dt);
    c.calibration = Some(scaling_calibration(model, shelf));
    let span = shelf.levels[3] - shelf.levels[0];
    c.human_ws = 2.0 * crate::operator::HAND_BOX[2];
    c.arm_ws = span - c.torso_ws;
    c.task_torso_schedule = script.torso_schedule.clone();
    c
}

/// Start configuration: torso down, tool at the nominal arm centre, pointing
/// at the shelf.
pub fn home_joints(model: &RobotModel, weights: &IkWeights) -> JointVector {
    let (lo, _) = model.torso_range();
    let seed = JointVector::new(lo, [0.0, 1.53, 0.0, 1.31, 0.0, -1.28, 0.0]);
    let target = Pose::new(
        Vector3::new(0.6, 0.0, model.mount_z(lo) + model.nominal_arm_center_z()),
        grasp_orientation(),
    );
    let mut st = IkState::default();
    st.max_iterations = 500;
    let mut j = model.clamp(&seed);
    for _ in 0..3 {
        st.clear();
        j = best_effort(solve_arm_ik(model, &mut st, &j, &target, weights))
            .map(|r| r.solution)
            .unwrap_or(j);
    }
    j
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CueView {
    pub target_id: usize,
    pub world_position: [f64; 3],
    /// Target highlight (the orange circle) is shown.
    pub highlighted: bool,
    pub out_of_reach: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub t: f64,
    pub tick: u64,
    pub mode: Mode,
    pub joints: JointVector,
    pub ee_position: [f64; 3],
    pub ee_orientation: [f64; 4],
    pub torso_command: f64,
    pub cue: Option<CueView>,
    pub phase: Phase,
    pub task_index: usize,
    pub container_positions: Vec<[f64; 3]>,
    pub mode_local: ModeLocalState,
    pub metrics: MetricsReport,
    pub events: Vec<LogEvent>,
    pub ended: bool,
}

#[derive(Debug, Clone, Default)]
struct Running {
    ticks: u64,
    moving: u64,
    manip_sum: f64,
    manip_min: f64,
    wrong: u32,
    short: f64,
    long: f64,
    completed: usize,
    current_start: u64,
}

/// One simulated trial.
#[derive(Debug, Clone)]
pub struct Session {
    model: RobotModel,
    cfg: SessionConfig,
    coord: Coordinator,
    ik: IkState,
    joints: JointVector,
    command: CommandSet,
    task: TaskState,
    world: TaskWorld,
    auto: Option<AutoAction>,
    tick: u64,
    log: TrialLog,
    subtask_start_tick: u64,
    ended: Option<(bool, String)>,
    running: Running,
    pending: Vec<LogEvent>,
    last_snapshot_events: Vec<LogEvent>,
}

fn quat_array(p: &Pose) -> [f64; 4] {
    let q = p.orientation.quaternion();
    [q.i, q.j, q.k, q.w]
}

fn v3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl Session {
    pub fn new(model: RobotModel, cfg: SessionConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let dt = cfg.dt();
        let mut mode_cfg = cfg
            .mode_config
            .clone()
            .unwrap_or_else(|| session_mode_config(&model, cfg.mode, dt, &cfg.shelf, &cfg.script));
        mode_cfg.mode = cfg.mode;
        mode_cfg.dt = dt;
        let joints = home_joints(&model, &cfg.weights);
        let ee = model.pose_unchecked(&joints);
        let local = ee.translated(Vector3::new(0.0, 0.0, -model.mount_z(joints.torso_pos)));
        let command = CommandSet::hold(joints.torso_pos, Pose::new(local.position, grasp_orientation()));
        let state = RobotState { joints, command };
        let coord = Coordinator::new(mode_cfg, &state)?;
        let operator = match &cfg.operator {
            OperatorSource::Synthetic(m) => Some(*m),
            _ => None,
        };
        let log = TrialLog::new(TrialMeta {
            schema_version: LOG_SCHEMA_VERSION,
            mode: cfg.mode,
            seed: cfg.seed,
            tick_hz: cfg.tick_hz,
            operator,
            source: match &cfg.operator {
                OperatorSource::Interactive => "interactive".into(),
                OperatorSource::Synthetic(_) => "synthetic".into(),
                OperatorSource::Replay(p) => format!("replay:{}", p.display()),
            },
        });
        let world = TaskWorld::new(&cfg.script, &cfg.shelf);
        Ok(Session {
            model,
            coord,
            ik: IkState::default(),
            joints,
            command,
            task: TaskState::default(),
            world,
            auto: None,
            tick: 0,
            log,
            subtask_start_tick: 0,
            ended: None,
            running: Running {
                manip_min: f64::INFINITY,
                ..Running::default()
            },
            pending: vec![LogEvent::SubtaskStarted { index: 0 }],
            last_snapshot_events: Vec::new(),
            cfg,
        })
    }

    pub fn model(&self) -> &RobotModel {
        &self.model
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn mode(&self) -> Mode {
        self.coord.mode()
    }

    pub fn joints(&self) -> &JointVector {
        &self.joints
    }

    pub fn command(&self) -> &CommandSet {
        &self.command
    }

    pub fn task(&self) -> &TaskState {
        &self.task
    }

    pub fn world(&self) -> &TaskWorld {
        &self.world
    }

    pub fn log(&self) -> &TrialLog {
        &self.log
    }

    pub fn into_log(self) -> TrialLog {
        self.log
    }

    pub fn dt(&self) -> f64 {
        self.cfg.dt()
    }

    /// Start-of-tick time of the next tick.
    pub fn time(&self) -> f64 {
        self.tick as f64 * self.dt()
    }

    pub fn is_ended(&self) -> bool {
        self.ended.is_some()
    }

    pub fn ended(&self) -> Option<&(bool, String)> {
        self.ended.as_ref()
    }

    /// Mode parameters currently in effect.
    pub fn mode_config(&self) -> &ModeConfig {
        &self.coord.cfg
    }

    /// Stop the trial; further ticks are rejected.
    pub fn end(&mut self, reason: &str) {
        if self.ended.is_none() {
            let done = self.task.phase == Phase::Done;
            self.ended = Some((done, reason.to_string()));
            if let Some(r) = self.log.records.last_mut() {
                r.events.push(LogEvent::TrialEnded {
                    done,
                    reason: reason.to_string(),
                });
            }
        }
    }

    /// Switch mode; takes effect on the next tick.
    pub fn switch_mode(&mut self, mode: Mode) {
        let from = self.coord.mode();
        if from == mode {
            return;
        }
        let state = RobotState {
            joints: self.joints,
            command: self.command,
        };
        self.coord.switch_mode(mode, &state);
        self.pending.push(LogEvent::ModeSwitched { from, to: mode });
    }

    fn anchor_z(&self, cmd: &CommandSet, torso_exec: f64) -> f64 {
        if self.coord.mode().anchors_world() {
            self.model.mount_z(cmd.torso_target)
        } else {
            self.model.mount_z(torso_exec)
        }
    }

    /// World position the current command asks the end effector to reach.
    pub fn commanded_ee(&self) -> [f64; 3] {
        let z0 = self.anchor_z(&self.command, self.joints.torso_pos);
        let p = self.command.arm_target.position;
        [p.x, p.y, p.z + z0]
    }

    pub fn cue(&self) -> Option<Cue> {
        cue_for(&self.task, &self.cfg.script, &self.cfg.shelf, &self.model, &self.joints)
    }

    pub fn observation(&self) -> Observation {
        let ee = self.model.pose_unchecked(&self.joints).position;
        let mc = &self.coord.cfg;
        Observation {
            t: self.time(),
            mode: self.coord.mode(),
            phase: self.task.phase,
            task_index: self.task.index,
            cue: self.cue(),
            ee: v3(&ee),
            commanded_ee: self.commanded_ee(),
            torso_pos: self.joints.torso_pos,
            torso_target: self.command.torso_target,
            shoulder_z: self.model.shoulder_world(self.joints.torso_pos).z,
            torso_range: mc.torso_range,
            arm_local_z: self.command.arm_target.position.z,
            arm_z_range: mc.arm_z_range,
            preset_heights: mc.preset_heights.clone(),
            debounce_s: mc.debounce_s,
        }
    }

    /// Initial absolute hand position matching the robot's start state.
    pub fn hand_start(&self) -> [f64; 3] {
        let mut h = HAND_CENTRE;
        if self.coord.mode() == Mode::S {
            if let Some(cal) = self.coord.cfg.calibration {
                let mc = &self.coord.cfg;
                let world = self.commanded_ee()[2];
                let base = self.model.base_height() + cal.torso_origin + cal.arm_origin_z;
                let u = ((world - base) / (mc.torso_scale() + mc.arm_scale())).clamp(0.0, mc.human_ws);
                h[2] = cal.human_origin_z + u;
            }
        }
        h
    }

    fn integrate_arm(&self, torso: f64, q_des: &[f64; ARM_DOF]) -> JointVector {
        let dt = self.dt();
        let cur = self.joints;
        let mut step = [0.0; ARM_DOF];
        for (i, s) in step.iter_mut().enumerate() {
            let lim = self.model.joint(i).velocity_limit * dt;
            *s = (q_des[i] - cur.arm_q[i]).clamp(-lim, lim);
        }
        let p0 = self.model.pose_unchecked(&cur).position;
        let cap = self.model.spec().max_ee_speed * dt;
        let mut scale = 1.0;
        let mut next = cur;
        for _ in 0..3 {
            let q: [f64; ARM_DOF] = std::array::from_fn(|i| cur.arm_q[i] + scale * step[i]);
            next = self.model.clamp(&JointVector::new(torso, q));
            let d = (self.model.pose_unchecked(&next).position - p0).norm();
            if d <= cap * (1.0 + 1e-9) {
                break;
            }
            scale *= cap / d;
        }
        next
    }

    /// Advance the simulation by one tick.
    pub fn tick(&mut self, frame: &ControlFrame) -> Result<StateSnapshot, SimError> {
        if self.ended.is_some() {
            return Err(SimError::Ended);
        }
        let dt = self.dt();
        let t0 = self.time();
        let t1 = (self.tick + 1) as f64 * dt;
        let mut events = std::mem::take(&mut self.pending);

        let mut frame = *frame;
        frame.t = t0;
        if let Err(e) = frame.validate() {
            events.push(LogEvent::Error {
                source: "input".into(),
                message: e,
            });
            frame = ControlFrame::idle(t0);
        }
        if frame.clutch_held {
            frame.hand_delta = [0.0; 3];
        }

        // Mode step (suspended during auto actions and after the task).
        let state = RobotState {
            joints: self.joints,
            command: self.command,
        };
        let operator_active = self.auto.is_none() && self.task.phase != Phase::Done;
        let mut hand_dz = 0.0;
        let mut cmd = self.command;
        cmd.compensation_applied = 0.0;
        if operator_active {
            match self
                .coord
                .step(&frame, &state, self.task.leg(), &self.model, &self.cfg.weights)
            {
                Ok(c) => {
                    cmd = c;
                    hand_dz = frame.hand_delta[2];
                }
                Err(e) => events.push(LogEvent::Error {
                    source: "coordination".into(),
                    message: e.to_string(),
                }),
            }
        }

        // Torso rate limit.
        let vmax = self.model.torso_velocity_limit() * dt;
        let torso_prev = self.joints.torso_pos;
        let torso = self
            .model
            .clamp_torso(torso_prev + (cmd.torso_target - torso_prev).clamp(-vmax, vmax));

        // Arm target.
        let q_des = match (&self.auto, cmd.arm_joints) {
            (None, Some(plan)) if operator_active => plan.arm_q,
            _ => {
                let goal = match &self.auto {
                    Some(a) => a.target(t1),
                    None => cmd
                        .arm_target
                        .translated(Vector3::new(0.0, 0.0, self.anchor_z(&cmd, torso))),
                };
                let cur = JointVector::new(torso, self.joints.arm_q);
                match best_effort(solve_arm_ik(&self.model, &mut self.ik, &cur, &goal, &self.cfg.weights)) {
                    Ok(r) => r.solution.arm_q,
                    Err(e) => {
                        events.push(LogEvent::Error {
                            source: "ik".into(),
                            message: e.to_string(),
                        });
                        self.joints.arm_q
                    }
                }
            }
        };
        self.joints = self.integrate_arm(torso, &q_des);
        self.command = cmd;
        let ee_pose = self.model.pose_unchecked(&self.joints);
        let ee = ee_pose.position;

        // Task.
        self.advance_task(&frame, &ee_pose, t1, &mut events);
        self.world.follow(&ee);

        let manip = arm_jacobian(&self.model, &self.joints)
            .map(|j| manipulability_index(&j))
            .unwrap_or(0.0);
        let moving = (self.joints.torso_pos - torso_prev).abs() / dt > TORSO_MOVING_EPS;
        let cue = self.cue();
        let out_of_reach = cue.is_some_and(|c| c.out_of_reach);
        let arm_t = self.command.arm_target.position;
        let record = TickRecord {
            tick: self.tick,
            t: t1,
            joints: self.joints,
            ee_position: v3(&ee),
            ee_orientation: quat_array(&ee_pose),
            manipulability: manip,
            torso_target: self.command.torso_target,
            torso_moving: moving,
            arm_target: v3(&arm_t),
            commanded_world_z: self.commanded_ee()[2],
            hand_dz,
            compensation_applied: self.command.compensation_applied,
            mode: self.coord.mode(),
            phase: self.task.phase,
            task_index: self.task.index,
            out_of_reach,
            events: events.clone(),
        };
        self.update_running(&record);
        self.log.records.push(record);
        self.tick += 1;

        if self.task.phase == Phase::Done {
            self.end("done");
        } else if (self.tick - self.subtask_start_tick) as f64 * dt > self.cfg.watchdog_s {
            self.end("watchdog");
        }
        self.last_snapshot_events = events;
        Ok(self.snapshot())
    }

    fn advance_task(&mut self, frame: &ControlFrame, ee_pose: &Pose, t1: f64, events: &mut Vec<LogEvent>) {
        let radius = self.cfg.script.confirm_radius;
        let before = self.task;
        let apply = |task: &mut TaskState, ev: TaskEvent, events: &mut Vec<LogEvent>| match advance(task, ev, radius) {
            Ok(next) => {
                if next.wrong_selection_count > task.wrong_selection_count {
                    let distance = match ev {
                        TaskEvent::ConfirmNearTarget { distance } => distance,
                        _ => f64::NAN,
                    };
                    events.push(LogEvent::WrongSelection { distance });
                }
                *task = next;
            }
            Err(e) => events.push(LogEvent::Error {
                source: "task".into(),
                message: e.to_string(),
            }),
        };
        let mut task = self.task;
        if let Some(a) = self.auto {
            if a.switched(t1) {
                if a.pick && self.world.attached.is_none() && task.phase == Phase::AutoPick {
                    self.world.attached = Some(a.container);
                    events.push(LogEvent::Attached { container: a.container });
                } else if !a.pick && self.world.attached == Some(a.container) {
                    self.world.attached = None;
                    let p = v3(&ee_pose.position);
                    self.world.positions[a.container] = p;
                    events.push(LogEvent::Released {
                        container: a.container,
                        position: p,
                    });
                }
            }
            if a.finished(t1) {
                apply(&mut task, TaskEvent::AutoActionDone, events);
                self.auto = None;
            }
        } else if task.phase != Phase::Done {
            if let Some(cue) = cue_for(&task, &self.cfg.script, &self.cfg.shelf, &self.model, &self.joints) {
                let c = Vector3::from(cue.world_position);
                let dist = (ee_pose.position - c).norm();
                if matches!(task.phase, Phase::MovingToPick | Phase::MovingToPlace) && dist <= radius {
                    apply(&mut task, TaskEvent::ReachedTarget, events);
                }
                if frame.confirm_pressed {
                    let ev = if matches!(task.phase, Phase::AwaitConfirmPick | Phase::AwaitConfirmPlace) {
                        TaskEvent::ConfirmNearTarget { distance: dist }
                    } else {
                        TaskEvent::WrongTarget
                    };
                    apply(&mut task, ev, events);
                }
            }
            if task.phase.is_auto() {
                self.auto = auto_pick_place(&task, &self.cfg.script, &self.cfg.shelf, ee_pose, t1);
            }
        }
        if task.phase != before.phase {
            events.push(LogEvent::PhaseChanged {
                from: before.phase,
                to: task.phase,
            });
            if before.phase == Phase::AutoPlace {
                events.push(LogEvent::SubtaskCompleted { index: before.index });
                if task.phase != Phase::Done {
                    events.push(LogEvent::SubtaskStarted { index: task.index });
                }
                self.subtask_start_tick = self.tick + 1;
            }
            if before.phase.is_auto() {
                let state = RobotState {
                    joints: self.joints,
                    command: self.command,
                };
                self.coord.resync(&state);
            }
        }
        self.task = task;
    }

    fn update_running(&mut self, r: &TickRecord) {
        let dt = self.dt();
        let run = &mut self.running;
        run.ticks += 1;
        run.moving += r.torso_moving as u64;
        run.manip_sum += r.manipulability;
        run.manip_min = run.manip_min.min(r.manipulability);
        for e in &r.events {
            match e {
                LogEvent::WrongSelection { .. } => run.wrong += 1,
                LogEvent::SubtaskStarted { .. } => run.current_start = r.tick,
                LogEvent::SubtaskCompleted { index } => {
                    let d = (r.tick - run.current_start) as f64 * dt;
                    match self.cfg.script.subtasks[*index].range_class {
                        crate::task::RangeClass::ShortRange => run.short += d,
                        crate::task::RangeClass::LongRange => run.long += d,
                    }
                    run.completed += 1;
                }
                _ => {}
            }
        }
    }

    /// Metrics accumulated so far.
    pub fn running_metrics(&self) -> MetricsReport {
        let r = &self.running;
        let dt = self.dt();
        let n = r.ticks.max(1) as f64;
        MetricsReport {
            total_time: r.ticks as f64 * dt,
            short_range_time: r.short,
            long_range_time: r.long,
            manipulability_mean: if r.ticks > 0 { r.manip_sum / n } else { 0.0 },
            manipulability_min: if r.ticks > 0 { r.manip_min } else { 0.0 },
            torso_motion_time: r.moving as f64 * dt,
            torso_motion_fraction: if r.ticks > 0 { r.moving as f64 / n } else { 0.0 },
            wrong_selections: r.wrong,
            completed_subtasks: r.completed,
            done: self.task.phase == Phase::Done,
        }
    }

    pub fn snapshot(&self) -> StateSnapshot {
        let ee = self.model.pose_unchecked(&self.joints);
        StateSnapshot {
            t: self.time(),
            tick: self.tick,
            mode: self.coord.mode(),
            joints: self.joints,
            ee_position: v3(&ee.position),
            ee_orientation: quat_array(&ee),
            torso_command: self.command.torso_target,
            cue: self.cue().map(|c| CueView {
                target_id: c.target_id,
                world_position: c.world_position,
                highlighted: true,
                out_of_reach: c.out_of_reach,
            }),
            phase: self.task.phase,
            task_index: self.task.index,
            container_positions: self.world.positions.clone(),
            mode_local: self.coord.local_state(),
            metrics: self.running_metrics(),
            events: self.last_snapshot_events.clone(),
            ended: self.ended.is_some(),
        }
    }
}

/// Result of one headless trial.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub log: TrialLog,
    pub trace: InputTrace,
    pub metrics: MetricsReport,
    pub partial: bool,
}

fn finish(session: Session, trace: InputTrace) -> Result<TrialOutcome, SimError> {
    let script = session.cfg.script.clone();
    let log_path = session.cfg.log_path.clone();
    let log = session.into_log();
    if let Some(p) = log_path {
        log.save(&p).map_err(|e| SimError::Config(format!("writing {}: {e}", p.display())))?;
    }
    let (metrics, partial) = match compute_metrics(&log, &script) {
        Ok(m) => (m, false),
        Err(e) => (*e.report(), true),
    };
    Ok(TrialOutcome {
        log,
        trace,
        metrics,
        partial,
    })
}

/// Run one trial with a synthetic operator.
pub fn run_trial(model: &RobotModel, cfg: &SessionConfig) -> Result<TrialOutcome, SimError> {
    let OperatorSource::Synthetic(op_model) = cfg.operator else {
        return Err(SimError::Config("run_trial needs a synthetic operator".into()));
    };
    let mut session = Session::new(model.clone(), cfg.clone())?;
    let mut op = SyntheticOperator::new(op_model, cfg.dt(), HAND_CENTRE).with_hand(session.hand_start());
    let mut trace = InputTrace::new(TraceMeta {
        schema_version: TRACE_SCHEMA_VERSION,
        mode: cfg.mode,
        seed: cfg.seed,
        tick_hz: cfg.tick_hz,
        operator: Some(op_model),
    });
    while !session.is_ended() {
        let f = op.generate_frame(&session.observation());
        trace.record(f);
        session.tick(&f)?;
    }
    finish(session, trace)
}

/// Replay a recorded trace. A trace that runs out before the task is done
/// yields partial metrics.
pub fn replay_trace(model: &RobotModel, cfg: &SessionConfig, trace: &InputTrace) -> Result<TrialOutcome, SimError> {
    trace.check_compatible(cfg.mode, cfg.tick_hz)?;
    let mut cfg = cfg.clone();
    cfg.operator = match &cfg.operator {
        OperatorSource::Replay(p) => OperatorSource::Replay(p.clone()),
        _ => OperatorSource::Replay(PathBuf::from("<memory>")),
    };
    cfg.seed = trace.meta.seed;
    let mut session = Session::new(model.clone(), cfg)?;
    // Replays carry the original operator parameters in the log metadata.
    session.log.meta.operator = trace.meta.operator;
    session.log.meta.source = "synthetic".into();
    for f in &trace.frames {
        if session.is_ended() {
            break;
        }
        session.tick(f)?;
    }
    if !session.is_ended() {
        session.end("trace exhausted");
    }
    finish(session, trace.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: String,
    pub medians: Vec<(Mode, f64)>,
    pub test: StatTestResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub modes: Vec<Mode>,
    pub trials_per_mode: usize,
    pub rows: Vec<TrialRow>,
    pub comparisons: Vec<MetricComparison>,
}

impl BatchReport {
    pub fn comparison(&self, metric: &str) -> Option<&MetricComparison> {
        self.comparisons.iter().find(|c| c.metric == metric)
    }

    pub fn median(&self, metric: &str, mode: Mode) -> Option<f64> {
        self.comparison(metric)?
            .medians
            .iter()
            .find(|(m, _)| *m == mode)
            .map(|(_, v)| *v)
    }
}

/// Metrics compared across modes in batch reports.
pub const COMPARED_METRICS: [&str; 5] = [
    "total_time",
    "short_range_time",
    "long_range_time",
    "manipulability_mean",
    "torso_motion_time",
];

fn metric_value(m: &MetricsReport, name: &str) -> f64 {
    match name {
        "total_time" => m.total_time,
        "short_range_time" => m.short_range_time,
        "long_range_time" => m.long_range_time,
        "manipulability_mean" => m.manipulability_mean,
        "torso_motion_time" => m.torso_motion_time,
        "torso_motion_fraction" => m.torso_motion_fraction,
        _ => f64::NAN,
    }
}

/// Per-mode medians and Kruskal-Wallis / Dunn comparisons from trial rows.
/// Fewer than two modes give no comparisons.
pub fn analyze(rows: &[TrialRow], modes: &[Mode]) -> Result<Vec<MetricComparison>, SimError> {
    let mut out = Vec::new();
    if modes.len() < 2 {
        return Ok(out);
    }
    for metric in COMPARED_METRICS {
        let groups: Vec<Vec<f64>> = modes
            .iter()
            .map(|m| {
                rows.iter()
                    .filter(|r| r.mode == *m && r.error.is_none())
                    .map(|r| metric_value(&r.metrics, metric))
                    .collect()
            })
            .collect();
        let test = kruskal_wallis(&groups)?;
        out.push(MetricComparison {
            metric: metric.to_string(),
            medians: modes.iter().zip(&groups).map(|(m, g)| (*m, median(g))).collect(),
            test,
        });
    }
    Ok(out)
}

/// Seeds used for trial `k` of a batch.
pub fn batch_seed(base: u64, k: usize) -> u64 {
    base.wrapping_add(k as u64)
}

/// Run every mode × seed combination. Trials run on all available cores;
/// results do not depend on scheduling.
pub fn run_batch(model: &RobotModel, base: &SessionConfig, modes: &[Mode], seeds: &[u64]) -> Result<BatchReport, SimError> {
    let jobs: Vec<(Mode, u64)> = modes.iter().flat_map(|m| seeds.iter().map(move |s| (*m, *s))).collect();
    let run = |(mode, seed): (Mode, u64)| -> TrialRow {
        let mut cfg = base.clone();
        cfg.mode = mode;
        cfg.seed = seed;
        cfg.mode_config = cfg.mode_config.map(|mut c| {
            c.mode = mode;
            c
        });
        if let OperatorSource::Synthetic(m) = &mut cfg.operator {
            m.seed = seed;
        }
        cfg.log_path = base
            .log_path
            .as_ref()
            .map(|dir| dir.join(format!("trial_{mode}_{seed}.jsonl.gz")));
        let trace_path = base
            .log_path
            .as_ref()
            .map(|dir| dir.join(format!("trial_{mode}_{seed}.trace.jsonl")));
        match run_trial(model, &cfg) {
            Ok(o) => {
                let saved = trace_path.map_or(Ok(()), |p| o.trace.save(&p));
                TrialRow {
                    mode,
                    seed,
                    metrics: o.metrics,
                    error: match saved {
                        Err(e) => Some(format!("saving trace: {e}")),
                        Ok(()) => o.partial.then(|| "partial trial".to_string()),
                    },
                }
            }
            Err(e) => TrialRow {
                mode,
                seed,
                metrics: MetricsReport {
                    total_time: 0.0,
                    short_range_time: 0.0,
                    long_range_time: 0.0,
                    manipulability_mean: 0.0,
                    manipulability_min: 0.0,
                    torso_motion_time: 0.0,
                    torso_motion_fraction: 0.0,
                    wrong_selections: 0,
                    completed_subtasks: 0,
                    done: false,
                },
                error: Some(e.to_string()),
            },
        }
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    let mut rows: Vec<Option<TrialRow>> = vec![None; jobs.len()];
    if workers <= 1 {
        for (i, j) in jobs.iter().enumerate() {
            rows[i] = Some(run(*j));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let results = std::sync::Mutex::new(&mut rows);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= jobs.len() {
                        break;
                    }
                    let row = run(jobs[i]);
                    results.lock().expect("no worker panics while holding the lock")[i] = Some(row);
                });
            }
        });
    }
    let rows: Vec<TrialRow> = rows.into_iter().map(|r| r.expect("every job ran")).collect();
    let comparisons = analyze(&rows, modes)?;
    Ok(BatchReport {
        modes: modes.to_vec(),
        trials_per_mode: seeds.len(),
        rows,
        comparisons,
    })
}

/// Number of sub-tasks in a complete trial.
pub const FULL_TASK: usize = SUBTASK_COUNT;

/// Per-mode medians and test statistics, one row per (metric, mode).
pub fn write_stats_csv<W: std::io::Write>(w: W, comparisons: &[MetricComparison]) -> Result<(), csv::Error> {
    let mut c = csv::Writer::from_writer(w);
    c.write_record(["metric", "mode", "median", "h", "df", "p"])?;
    for cmp in comparisons {
        for (mode, med) in &cmp.medians {
            c.write_record([
                cmp.metric.clone(),
                mode.to_string(),
                med.to_string(),
                cmp.test.h.to_string(),
                cmp.test.df.to_string(),
                cmp.test.p.to_string(),
            ])?;
        }
    }
    c.flush()?;
    Ok(())
}

/// Dunn pairwise table with Bonferroni-adjusted p values.
pub fn write_pairwise_csv<W: std::io::Write>(w: W, modes: &[Mode], comparisons: &[MetricComparison]) -> Result<(), csv::Error> {
    let mut c = csv::Writer::from_writer(w);
    c.write_record(["metric", "mode_a", "mode_b", "z", "p_raw", "p_adjusted"])?;
    for cmp in comparisons {
        for d in &cmp.test.pairwise {
            c.write_record([
                cmp.metric.clone(),
                modes[d.a].to_string(),
                modes[d.b].to_string(),
                d.z.to_string(),
                d.p_raw.to_string(),
                d.p_adjusted.to_string(),
            ])?;
        }
    }
    c.flush()?;
    Ok(())
}
