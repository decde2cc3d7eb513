//! Synthetic operators and recorded input traces.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordination::{ControlFrame, JoystickEdge, Mode};
use crate::task::{Cue, Phase};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TorsoStrategy {
    TorsoFirst,
    ArmFirst,
}

fn default_gain() -> f64 {
    4.0
}
fn default_confirm_radius() -> f64 {
    0.02
}

/// Parameters of a synthetic operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorModel {
    /// Maximum intentional hand speed, m/s.
    pub hand_speed: f64,
    /// Delay before reacting to a new cue or a cleared prompt, s.
    pub reaction_delay: f64,
    /// Dwell inside the confirm radius before pressing confirm, s.
    pub confirm_latency: f64,
    pub torso_strategy: TorsoStrategy,
    /// Joystick deflection used for torso moves, in (0, 1].
    pub joystick_skill: f64,
    /// Standard deviation of the per-tick hand position jitter, m.
    pub noise_std: f64,
    pub seed: u64,
    /// Proportional gain of the hand toward the cue, 1/s.
    #[serde(default = "default_gain")]
    pub gain: f64,
    /// Distance at which the operator considers the target reached, m.
    #[serde(default = "default_confirm_radius")]
    pub confirm_radius: f64,
}

impl Default for OperatorModel {
    /// The reference operator.
    fn default() -> Self {
        OperatorModel {
            hand_speed: 0.3,
            reaction_delay: 0.3,
            confirm_latency: 0.2,
            torso_strategy: TorsoStrategy::TorsoFirst,
            joystick_skill: 1.0,
            noise_std: 0.002,
            seed: 0,
            gain: default_gain(),
            confirm_radius: default_confirm_radius(),
        }
    }
}

impl OperatorModel {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.hand_speed > 0.0 && self.reaction_delay > 0.0 && self.confirm_latency > 0.0) {
            return Err("hand_speed, reaction_delay and confirm_latency must be positive".into());
        }
        if !(self.joystick_skill > 0.0 && self.joystick_skill <= 1.0) {
            return Err("joystick_skill must be in (0, 1]".into());
        }
        if !(self.noise_std >= 0.0) || !(self.gain > 0.0) || !(self.confirm_radius > 0.0) {
            return Err("noise_std must be non-negative, gain and confirm_radius positive".into());
        }
        Ok(())
    }

    pub fn parse_toml(text: &str) -> Result<Self, String> {
        let m: OperatorModel = toml::from_str(text).map_err(|e| e.to_string())?;
        m.validate()?;
        Ok(m)
    }
}

/// What the operator sees each tick.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub t: f64,
    pub mode: Mode,
    pub phase: Phase,
    pub task_index: usize,
    pub cue: Option<Cue>,
    /// Measured end-effector position, world frame.
    pub ee: [f64; 3],
    /// Commanded end-effector position (the on-screen target marker), world frame.
    pub commanded_ee: [f64; 3],
    pub torso_pos: f64,
    pub torso_target: f64,
    /// World height of the reach-sphere centre at the current torso position.
    pub shoulder_z: f64,
    pub torso_range: [f64; 2],
    /// Commanded arm height in the torso frame.
    pub arm_local_z: f64,
    pub arm_z_range: [f64; 2],
    pub preset_heights: Vec<f64>,
    pub debounce_s: f64,
}

/// Extent of the operator's comfortable hand workspace around its centre, m.
pub const HAND_BOX: [f64; 3] = [0.3, 0.3, 0.3];

/// Seeded synthetic operator. Deterministic given model and observations.
#[derive(Debug, Clone)]
pub struct SyntheticOperator {
    pub model: OperatorModel,
    dt: f64,
    rng: ChaCha8Rng,
    jitter: Normal<f64>,
    jitter_prev: [f64; 3],
    hand: [f64; 3],
    centre: [f64; 3],
    cue_key: Option<(usize, bool)>,
    idle_until: f64,
    torso_hold_until: f64,
    near_since: Option<f64>,
    confirm_ready_at: f64,
    clutching: bool,
    last_edge_t: f64,
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cap(v: [f64; 3], max: f64) -> [f64; 3] {
    let n = norm(v);
    if n > max && n > 0.0 {
        v.map(|c| c * max / n)
    } else {
        v
    }
}

impl SyntheticOperator {
    /// `centre` is the middle of the hand workspace; the hand starts there.
    pub fn new(model: OperatorModel, dt: f64, centre: [f64; 3]) -> Self {
        let jitter = Normal::new(0.0, model.noise_std).expect("noise_std validated non-negative");
        SyntheticOperator {
            model,
            dt,
            rng: ChaCha8Rng::seed_from_u64(model.seed),
            jitter,
            jitter_prev: [0.0; 3],
            hand: centre,
            centre,
            cue_key: None,
            idle_until: 0.0,
            torso_hold_until: f64::NEG_INFINITY,
            near_since: None,
            confirm_ready_at: 0.0,
            clutching: false,
            last_edge_t: f64::NEG_INFINITY,
        }
    }

    /// Start from a different hand position inside the workspace.
    pub fn with_hand(mut self, hand: [f64; 3]) -> Self {
        self.hand = hand;
        self
    }

    pub fn hand(&self) -> [f64; 3] {
        self.hand
    }

    fn frame(&self, t: f64) -> ControlFrame {
        let mut f = ControlFrame::idle(t);
        f.hand_pos_abs = self.hand;
        f
    }

    /// Change in the i.i.d. positional jitter since the last hand move.
    fn jitter_delta(&mut self) -> [f64; 3] {
        let n: [f64; 3] = std::array::from_fn(|_| self.jitter.sample(&mut self.rng));
        let d = sub(n, self.jitter_prev);
        self.jitter_prev = n;
        d
    }

    fn move_hand(&mut self, f: &mut ControlFrame, delta: [f64; 3], scaling: bool) {
        if !scaling {
            let rel = sub(self.hand, self.centre);
            let leaves = (0..3).any(|k| (rel[k] + delta[k]).abs() > HAND_BOX[k]);
            if leaves {
                self.clutching = true;
            }
        }
        if self.clutching {
            self.recentre(f);
            return;
        }
        for k in 0..3 {
            self.hand[k] += delta[k];
        }
        if scaling {
            self.hand[2] = self.hand[2].clamp(self.centre[2] - HAND_BOX[2], self.centre[2] + HAND_BOX[2]);
        }
        f.hand_delta = delta;
        f.hand_pos_abs = self.hand;
    }

    fn recentre(&mut self, f: &mut ControlFrame) {
        let back = cap(sub(self.centre, self.hand), self.model.hand_speed * self.dt);
        for k in 0..3 {
            self.hand[k] += back[k];
        }
        if norm(sub(self.centre, self.hand)) < 1e-9 {
            self.clutching = false;
        }
        f.clutch_held = true;
        f.hand_pos_abs = self.hand;
    }

    /// Torso action for manual modes. Returns true if the torso is being
    /// handled this tick (so the hand must stay still).
    fn torso_action(&mut self, obs: &Observation, cue: &Cue, f: &mut ControlFrame) -> bool {
        let up = cue.world_position[2] > obs.shoulder_z;
        let at_limit = if up {
            obs.torso_target >= obs.torso_range[1] - 1e-6
        } else {
            obs.torso_target <= obs.torso_range[0] + 1e-6
        };
        if cue.out_of_reach && !at_limit {
            self.torso_hold_until = obs.t + self.model.reaction_delay;
        }
        let settling = (obs.torso_pos - obs.torso_target).abs() > 1e-3;
        let active = obs.t < self.torso_hold_until && !at_limit;
        match obs.mode {
            Mode::V => {
                if active {
                    let s = self.model.joystick_skill;
                    f.joystick_y = if up { s } else { -s };
                }
                active || settling
            }
            Mode::PH => {
                if cue.out_of_reach && !at_limit && !settling {
                    if obs.t - self.last_edge_t >= obs.debounce_s + self.model.reaction_delay {
                        f.joystick_edge = if up { JoystickEdge::Up } else { JoystickEdge::Down };
                        self.last_edge_t = obs.t;
                    }
                    return true;
                }
                settling || obs.t - self.last_edge_t < obs.debounce_s + self.model.reaction_delay
            }
            _ => false,
        }
    }

    /// Produce the next control frame for the observation.
    pub fn generate_frame(&mut self, obs: &Observation) -> ControlFrame {
        let mut f = self.frame(obs.t);
        let Some(cue) = obs.cue else {
            return f;
        };
        if obs.phase.is_auto() {
            self.near_since = None;
            return f;
        }
        let key = (obs.task_index, obs.phase.is_pick());
        if self.cue_key != Some(key) {
            self.cue_key = Some(key);
            self.idle_until = obs.t + self.model.reaction_delay;
            self.near_since = None;
        }
        if obs.t < self.idle_until {
            return f;
        }
        let scaling = obs.mode == Mode::S;
        if self.clutching && !scaling {
            self.recentre(&mut f);
            return f;
        }

        if obs.mode.is_manual() {
            let torso_now = match self.model.torso_strategy {
                TorsoStrategy::TorsoFirst => true,
                TorsoStrategy::ArmFirst => {
                    let up = cue.world_position[2] > obs.shoulder_z;
                    let near_bound = if up {
                        obs.arm_local_z >= obs.arm_z_range[1] - 0.01
                    } else {
                        obs.arm_local_z <= obs.arm_z_range[0] + 0.01
                    };
                    near_bound || !cue.out_of_reach
                }
            };
            if torso_now && self.torso_action(obs, &cue, &mut f) {
                return f;
            }
        }

        let err = sub(cue.world_position, obs.commanded_ee);
        let step = cap(err.map(|e| e * self.model.gain * self.dt), self.model.hand_speed * self.dt);
        let jit = self.jitter_delta();
        let delta = [step[0] + jit[0], step[1] + jit[1], step[2] + jit[2]];
        self.move_hand(&mut f, delta, scaling);

        let close = norm(sub(cue.world_position, obs.ee)) <= self.model.confirm_radius;
        let awaiting = matches!(obs.phase, Phase::AwaitConfirmPick | Phase::AwaitConfirmPlace);
        if close && awaiting {
            let since = *self.near_since.get_or_insert(obs.t);
            if obs.t - since >= self.model.confirm_latency - 1e-9 && obs.t >= self.confirm_ready_at {
                f.confirm_pressed = true;
                self.confirm_ready_at = obs.t + 0.5;
            }
        } else {
            self.near_since = None;
        }
        f
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace recorded at {trace} Hz, simulator runs at {sim} Hz")]
    RateMismatch { trace: u32, sim: u32 },
    #[error("trace recorded in mode {trace}, session uses mode {session}")]
    ModeMismatch { trace: Mode, session: Mode },
    #[error("trace timestamps are not uniform at the tick rate (frame {0})")]
    NonUniform(usize),
    #[error("trace format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub schema_version: u32,
    pub mode: Mode,
    pub seed: u64,
    pub tick_hz: u32,
    pub operator: Option<OperatorModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TraceLine {
    Header(TraceMeta),
    Frame(ControlFrame),
}

/// Timestamped control frames plus their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTrace {
    pub meta: TraceMeta,
    pub frames: Vec<ControlFrame>,
}

impl InputTrace {
    pub fn new(meta: TraceMeta) -> Self {
        InputTrace {
            meta,
            frames: Vec::new(),
        }
    }

    pub fn record(&mut self, frame: ControlFrame) {
        self.frames.push(frame);
    }

    /// Check that frames sit on the tick grid `k / tick_hz`.
    pub fn validate(&self) -> Result<(), TraceError> {
        let dt = 1.0 / self.meta.tick_hz as f64;
        for (k, w) in self.frames.windows(2).enumerate() {
            if !(w[1].t > w[0].t) || ((w[1].t - w[0].t) - dt).abs() > 1e-6 {
                return Err(TraceError::NonUniform(k + 1));
            }
        }
        Ok(())
    }

    /// Guard used before replaying into a session.
    pub fn check_compatible(&self, mode: Mode, tick_hz: u32) -> Result<(), TraceError> {
        if self.meta.tick_hz != tick_hz {
            return Err(TraceError::RateMismatch {
                trace: self.meta.tick_hz,
                sim: tick_hz,
            });
        }
        if self.meta.mode != mode {
            return Err(TraceError::ModeMismatch {
                trace: self.meta.mode,
                session: mode,
            });
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), TraceError> {
        let head = serde_json::to_string(&TraceLine::Header(self.meta.clone())).map_err(|e| TraceError::Format(e.to_string()))?;
        writeln!(w, "{head}")?;
        for f in &self.frames {
            let line = serde_json::to_string(&TraceLine::Frame(*f)).map_err(|e| TraceError::Format(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, TraceError> {
        let mut meta = None;
        let mut frames = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceLine = serde_json::from_str(&line).map_err(|e| TraceError::Format(format!("line {}: {e}", n + 1)))?;
            match (rec, &meta) {
                (TraceLine::Header(m), None) => meta = Some(m),
                (TraceLine::Header(_), Some(_)) => return Err(TraceError::Format(format!("line {}: second header", n + 1))),
                (TraceLine::Frame(_), None) => return Err(TraceError::Format("trace must start with a header".into())),
                (TraceLine::Frame(f), Some(_)) => frames.push(f),
            }
        }
        let meta = meta.ok_or_else(|| TraceError::Format("empty trace".into()))?;
        if meta.schema_version != TRACE_SCHEMA_VERSION {
            return Err(TraceError::Format(format!("unsupported schema_version {}", meta.schema_version)));
        }
        let t = InputTrace { meta, frames };
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<(), TraceError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TraceError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
