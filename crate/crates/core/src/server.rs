//! Interactive sessions over a WebSocket: JSON text messages, one client per
//! session, latest-wins input and decimated snapshots.

use std::io;
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tungstenite::{Message, WebSocket};

use crate::coordination::{ControlFrame, JoystickEdge, Mode};
use crate::kinematics::RobotModel;
use crate::metrics::LogEvent;
use crate::operator::{InputTrace, TraceMeta, TRACE_SCHEMA_VERSION};
use crate::sim::{OperatorSource, Session, SessionConfig, SimError, StateSnapshot};

pub const PROTOCOL_VERSION: u32 = 1;

/// Environment variable holding the listen address for `serve`.
pub const LISTEN_ENV: &str = "TACSIM_LISTEN";
pub const DEFAULT_LISTEN: &str = "127.0.0.1:8765";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialAction {
    Start,
    Pause,
    Resume,
    Stop,
    Reset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Hello {
        #[serde(default)]
        client: String,
        #[serde(default)]
        protocol_version: Option<u32>,
    },
    /// Allowed while no trial is running, except `snapshot_hz`.
    Configure {
        #[serde(default)]
        mode: Option<Mode>,
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        tick_hz: Option<u32>,
        #[serde(default)]
        snapshot_hz: Option<f64>,
    },
    InputFrame {
        frame: ControlFrame,
    },
    ModeSwitch {
        mode: Mode,
    },
    TrialControl {
        action: TrialAction,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Malformed,
    InvalidFrame,
    InvalidConfig,
    InvalidState,
    SessionBusy,
    Io,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialState {
    Idle,
    Running,
    Paused,
    Ended,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        protocol_version: u32,
        mode: Mode,
        tick_hz: u32,
        seed: u64,
        state: TrialState,
        snapshot: Box<StateSnapshot>,
    },
    Snapshot {
        state: TrialState,
        snapshot: Box<StateSnapshot>,
    },
    Event {
        t: f64,
        tick: u64,
        event: LogEvent,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
}

impl ServerMessage {
    fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        ServerMessage::Error {
            code,
            message: message.into(),
        }
    }
}

/// Latest-wins input slot. Button presses and joystick edges latch until the
/// next tick consumes them so a press is never lost to a later frame.
#[derive(Debug, Clone, Default)]
struct Mailbox {
    latest: Option<ControlFrame>,
    confirm: bool,
    edge: JoystickEdge,
}

impl Mailbox {
    fn put(&mut self, f: ControlFrame) {
        self.confirm |= f.confirm_pressed;
        if f.joystick_edge != JoystickEdge::None {
            self.edge = f.joystick_edge;
        }
        self.latest = Some(f);
    }

    /// Frame for the next tick; without fresh input the hand holds still.
    fn take(&mut self, t: f64, hold_abs: [f64; 3]) -> ControlFrame {
        let mut f = self.latest.take().unwrap_or(ControlFrame {
            hand_pos_abs: hold_abs,
            ..ControlFrame::idle(t)
        });
        f.t = t;
        f.confirm_pressed = std::mem::take(&mut self.confirm);
        f.joystick_edge = std::mem::take(&mut self.edge);
        f
    }
}

/// Where finished interactive trials are written.
#[derive(Debug, Clone, Default)]
pub struct ServeOptions {
    pub out_dir: Option<PathBuf>,
}

/// Protocol state of one interactive session, independent of transport.
pub struct ServerSession {
    model: RobotModel,
    cfg: SessionConfig,
    session: Session,
    state: TrialState,
    mailbox: Mailbox,
    snapshot_every: u64,
    trace: InputTrace,
    hand_abs: [f64; 3],
    opts: ServeOptions,
    trials_saved: usize,
}

fn new_trace(cfg: &SessionConfig) -> InputTrace {
    InputTrace::new(TraceMeta {
        schema_version: TRACE_SCHEMA_VERSION,
        mode: cfg.mode,
        seed: cfg.seed,
        tick_hz: cfg.tick_hz,
        operator: None,
    })
}

impl ServerSession {
    pub fn new(model: RobotModel, mut cfg: SessionConfig, opts: ServeOptions) -> Result<Self, SimError> {
        cfg.operator = OperatorSource::Interactive;
        cfg.log_path = None;
        let session = Session::new(model.clone(), cfg.clone())?;
        let hand_abs = session.hand_start();
        Ok(ServerSession {
            trace: new_trace(&cfg),
            model,
            cfg,
            session,
            state: TrialState::Idle,
            mailbox: Mailbox::default(),
            snapshot_every: 1,
            hand_abs,
            opts,
            trials_saved: 0,
        })
    }

    pub fn state(&self) -> TrialState {
        self.state
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn tick_period(&self) -> Duration {
        Duration::from_secs_f64(self.cfg.dt())
    }

    pub fn snapshot_every(&self) -> u64 {
        self.snapshot_every
    }

    /// Input trace of the current trial, as applied tick by tick.
    pub fn trace(&self) -> &InputTrace {
        &self.trace
    }

    fn rebuild(&mut self) -> Result<(), SimError> {
        self.session = Session::new(self.model.clone(), self.cfg.clone())?;
        self.hand_abs = self.session.hand_start();
        self.trace = new_trace(&self.cfg);
        self.mailbox = Mailbox::default();
        self.state = TrialState::Idle;
        Ok(())
    }

    pub fn hello(&self) -> ServerMessage {
        ServerMessage::Hello {
            protocol_version: PROTOCOL_VERSION,
            mode: self.session.mode(),
            tick_hz: self.cfg.tick_hz,
            seed: self.cfg.seed,
            state: self.state,
            snapshot: Box::new(self.session.snapshot()),
        }
    }

    fn snapshot_msg(&self) -> ServerMessage {
        ServerMessage::Snapshot {
            state: self.state,
            snapshot: Box::new(self.session.snapshot()),
        }
    }

    /// Parse and handle one text message. Malformed input yields an error
    /// reply and leaves the session untouched.
    pub fn handle_text(&mut self, text: &str) -> Vec<ServerMessage> {
        match serde_json::from_str::<ClientMessage>(text) {
            Ok(m) => self.handle(m),
            Err(e) => vec![ServerMessage::error(ErrorCode::Malformed, e.to_string())],
        }
    }

    pub fn handle(&mut self, msg: ClientMessage) -> Vec<ServerMessage> {
        match msg {
            ClientMessage::Hello { protocol_version, .. } => match protocol_version {
                Some(v) if v != PROTOCOL_VERSION => vec![ServerMessage::error(
                    ErrorCode::InvalidConfig,
                    format!("protocol version {v} unsupported, server speaks {PROTOCOL_VERSION}"),
                )],
                _ => vec![self.hello()],
            },
            ClientMessage::Configure {
                mode,
                seed,
                tick_hz,
                snapshot_hz,
            } => self.configure(mode, seed, tick_hz, snapshot_hz),
            ClientMessage::InputFrame { frame } => {
                let mut f = frame;
                f.t = self.session.time();
                if let Err(e) = f.validate() {
                    return vec![ServerMessage::error(ErrorCode::InvalidFrame, e)];
                }
                if self.state != TrialState::Running {
                    return vec![ServerMessage::error(ErrorCode::InvalidState, "no running trial; input discarded")];
                }
                self.mailbox.put(f);
                Vec::new()
            }
            ClientMessage::ModeSwitch { mode } => match self.state {
                TrialState::Running | TrialState::Paused => {
                    self.session.switch_mode(mode);
                    Vec::new()
                }
                _ => self.configure(Some(mode), None, None, None),
            },
            ClientMessage::TrialControl { action } => self.control(action),
        }
    }

    fn configure(&mut self, mode: Option<Mode>, seed: Option<u64>, tick_hz: Option<u32>, snapshot_hz: Option<f64>) -> Vec<ServerMessage> {
        if let Some(hz) = snapshot_hz {
            if !(hz > 0.0 && hz.is_finite()) {
                return vec![ServerMessage::error(ErrorCode::InvalidConfig, "snapshot_hz must be positive")];
            }
        }
        let changes_trial = mode.is_some() || seed.is_some() || tick_hz.is_some();
        if changes_trial && matches!(self.state, TrialState::Running | TrialState::Paused) {
            return vec![ServerMessage::error(
                ErrorCode::InvalidState,
                "mode, seed and tick_hz can only change between trials",
            )];
        }
        if changes_trial {
            let mut cfg = self.cfg.clone();
            if let Some(m) = mode {
                cfg.mode = m;
                cfg.mode_config = None;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(hz) = tick_hz {
                cfg.tick_hz = hz;
                cfg.mode_config = None;
            }
            if let Err(e) = cfg.validate() {
                return vec![ServerMessage::error(ErrorCode::InvalidConfig, e.to_string())];
            }
            let old = std::mem::replace(&mut self.cfg, cfg);
            if let Err(e) = self.rebuild() {
                self.cfg = old;
                return vec![ServerMessage::error(ErrorCode::InvalidConfig, e.to_string())];
            }
        }
        if let Some(hz) = snapshot_hz {
            self.snapshot_every = ((self.cfg.tick_hz as f64 / hz).round() as u64).max(1);
        }
        vec![self.hello()]
    }

    fn control(&mut self, action: TrialAction) -> Vec<ServerMessage> {
        use TrialState::*;
        let bad = |s: TrialState| vec![ServerMessage::error(ErrorCode::InvalidState, format!("{action:?} not allowed while {s:?}"))];
        match (action, self.state) {
            (TrialAction::Start, Idle) | (TrialAction::Resume, Paused) => self.state = Running,
            (TrialAction::Pause, Running) => self.state = Paused,
            (TrialAction::Stop, Running | Paused) => {
                self.session.end("stopped");
                return self.finish();
            }
            (TrialAction::Reset, _) => {
                if let Err(e) = self.rebuild() {
                    return vec![ServerMessage::error(ErrorCode::InvalidConfig, e.to_string())];
                }
            }
            (_, s) => return bad(s),
        }
        vec![self.snapshot_msg()]
    }

    fn finish(&mut self) -> Vec<ServerMessage> {
        self.state = TrialState::Ended;
        let mut out = vec![self.snapshot_msg()];
        if let Some(dir) = &self.opts.out_dir {
            let stem = format!("interactive_{}_{}_{}", self.cfg.mode, self.cfg.seed, self.trials_saved);
            let saved = std::fs::create_dir_all(dir)
                .map_err(|e| e.to_string())
                .and_then(|_| self.session.log().save(&dir.join(format!("{stem}.jsonl.gz"))).map_err(|e| e.to_string()))
                .and_then(|_| self.trace.save(&dir.join(format!("{stem}.trace.jsonl"))).map_err(|e| e.to_string()));
            match saved {
                Ok(()) => self.trials_saved += 1,
                Err(e) => out.push(ServerMessage::error(ErrorCode::Io, e)),
            }
        }
        out
    }

    /// Advance one tick if a trial is running. Events are always sent;
    /// snapshots every `snapshot_every` ticks and on the final tick.
    pub fn step(&mut self) -> Vec<ServerMessage> {
        if self.state != TrialState::Running {
            return Vec::new();
        }
        let frame = self.mailbox.take(self.session.time(), self.hand_abs);
        if frame.validate().is_ok() {
            self.hand_abs = frame.hand_pos_abs;
        }
        self.trace.record(frame);
        let snap = match self.session.tick(&frame) {
            Ok(s) => s,
            Err(e) => return vec![ServerMessage::error(ErrorCode::InvalidState, e.to_string())],
        };
        let mut out: Vec<ServerMessage> = snap
            .events
            .iter()
            .map(|e| ServerMessage::Event {
                t: snap.t,
                tick: snap.tick,
                event: e.clone(),
            })
            .collect();
        if snap.ended {
            out.extend(self.finish());
        } else if snap.tick % self.snapshot_every == 0 {
            out.push(ServerMessage::Snapshot {
                state: self.state,
                snapshot: Box::new(snap),
            });
        }
        out
    }
}

fn send_all(ws: &mut WebSocket<TcpStream>, msgs: Vec<ServerMessage>) -> tungstenite::Result<()> {
    for m in msgs {
        let text = serde_json::to_string(&m).expect("server messages serialize");
        ws.send(Message::text(text))?;
    }
    Ok(())
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut))
}

/// Maximum ticks run back to back when the loop falls behind real time.
const MAX_CATCH_UP: u32 = 5;

fn client_loop(ws: &mut WebSocket<TcpStream>, shared: &Mutex<ServerSession>) -> tungstenite::Result<()> {
    let period = shared.lock().expect("session lock").tick_period();
    ws.get_ref().set_read_timeout(Some(Duration::from_millis(1)))?;
    let mut next = Instant::now() + period;
    loop {
        loop {
            match ws.read() {
                Ok(Message::Text(t)) => {
                    let replies = shared.lock().expect("session lock").handle_text(t.as_str());
                    send_all(ws, replies)?;
                }
                Ok(Message::Binary(_)) => send_all(ws, vec![ServerMessage::error(ErrorCode::Malformed, "binary frames are not supported")])?,
                Ok(Message::Close(_)) => return Ok(()),
                Ok(_) => {}
                Err(e) if is_timeout(&e) => break,
                Err(e) => return Err(e),
            }
        }
        let now = Instant::now();
        let mut ran = 0;
        while now >= next && ran < MAX_CATCH_UP {
            let out = shared.lock().expect("session lock").step();
            send_all(ws, out)?;
            next += period;
            ran += 1;
        }
        if now >= next {
            // Too far behind: drop the backlog rather than fast-forwarding.
            next = now + period;
        }
    }
}

fn reject(stream: TcpStream) {
    if let Ok(mut ws) = tungstenite::accept(stream) {
        let _ = send_all(
            &mut ws,
            vec![ServerMessage::error(ErrorCode::SessionBusy, "session already has a client")],
        );
        let _ = ws.close(None);
        let _ = ws.flush();
    }
}

/// Accept clients forever. The trial clock only runs while a client is
/// connected; a reconnecting client resumes the same session.
pub fn serve(listener: TcpListener, session: ServerSession) -> io::Result<()> {
    let shared = Arc::new(Mutex::new(session));
    let busy = Arc::new(AtomicBool::new(false));
    for stream in listener.incoming() {
        let stream = stream?;
        if busy.swap(true, Ordering::SeqCst) {
            std::thread::spawn(move || reject(stream));
            continue;
        }
        let shared = Arc::clone(&shared);
        let busy = Arc::clone(&busy);
        std::thread::spawn(move || {
            if let Ok(mut ws) = tungstenite::accept(stream) {
                let _ = client_loop(&mut ws, &shared);
            }
            busy.store(false, Ordering::SeqCst);
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mailbox_keeps_latest_and_latches_buttons() {
        let mut m = Mailbox::default();
        let mut a = ControlFrame::idle(0.0);
        a.confirm_pressed = true;
        a.hand_delta = [0.01, 0.0, 0.0];
        let mut b = ControlFrame::idle(0.0);
        b.hand_delta = [0.0, 0.02, 0.0];
        m.put(a);
        m.put(b);
        let f = m.take(0.5, [0.0; 3]);
        assert_eq!(f.hand_delta, [0.0, 0.02, 0.0]);
        assert!(f.confirm_pressed);
        assert_eq!(f.t, 0.5);
        let idle = m.take(0.51, [1.0, 2.0, 3.0]);
        assert!(!idle.confirm_pressed);
        assert_eq!(idle.hand_delta, [0.0; 3]);
        assert_eq!(idle.hand_pos_abs, [1.0, 2.0, 3.0]);
    }
}
