//! Trial logs and the metrics extracted from them.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordination::Mode;
use crate::kinematics::JointVector;
use crate::operator::OperatorModel;
use crate::task::{Phase, RangeClass, TaskScript};

pub const LOG_SCHEMA_VERSION: u32 = 1;

/// Torso speed above which the torso counts as moving, m/s.
pub const TORSO_MOVING_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogEvent {
    SubtaskStarted { index: usize },
    SubtaskCompleted { index: usize },
    PhaseChanged { from: Phase, to: Phase },
    WrongSelection { distance: f64 },
    Attached { container: usize },
    Released { container: usize, position: [f64; 3] },
    ModeSwitched { from: Mode, to: Mode },
    Error { source: String, message: String },
    TrialEnded { done: bool, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    /// Time at the end of the tick, s.
    pub t: f64,
    pub joints: JointVector,
    pub ee_position: [f64; 3],
    /// Unit quaternion, [x, y, z, w].
    pub ee_orientation: [f64; 4],
    pub manipulability: f64,
    pub torso_target: f64,
    pub torso_moving: bool,
    /// Commanded arm target in the torso frame.
    pub arm_target: [f64; 3],
    /// Commanded world end-effector height.
    pub commanded_world_z: f64,
    /// Vertical hand input applied this tick (zero while the mode is suspended).
    pub hand_dz: f64,
    pub compensation_applied: f64,
    pub mode: Mode,
    pub phase: Phase,
    pub task_index: usize,
    pub out_of_reach: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<LogEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMeta {
    pub schema_version: u32,
    pub mode: Mode,
    pub seed: u64,
    pub tick_hz: u32,
    pub operator: Option<OperatorModel>,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine {
    Header(TrialMeta),
    Tick(TickRecord),
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialLog {
    pub meta: TrialMeta,
    pub records: Vec<TickRecord>,
}

impl TrialLog {
    pub fn new(meta: TrialMeta) -> Self {
        TrialLog {
            meta,
            records: Vec::new(),
        }
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.meta.tick_hz as f64
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), LogError> {
        let fmt = |e: serde_json::Error| LogError::Format(e.to_string());
        writeln!(w, "{}", serde_json::to_string(&LogLine::Header(self.meta.clone())).map_err(fmt)?)?;
        for r in &self.records {
            // Records are cloned into the tagged wrapper; logs are written once.
            writeln!(w, "{}", serde_json::to_string(&LogLine::Tick(r.clone())).map_err(fmt)?)?;
        }
        Ok(())
    }

    pub fn to_jsonl_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, LogError> {
        let mut meta = None;
        let mut records = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LogLine = serde_json::from_str(&line).map_err(|e| LogError::Format(format!("line {}: {e}", n + 1)))?;
            match (rec, meta.is_some()) {
                (LogLine::Header(m), false) => meta = Some(m),
                (LogLine::Tick(t), true) => records.push(t),
                _ => return Err(LogError::Format(format!("line {}: header must come first, once", n + 1))),
            }
        }
        let meta = meta.ok_or_else(|| LogError::Format("empty log".into()))?;
        Ok(TrialLog { meta, records })
    }

    /// Write to `path`; gzip-compressed when it ends in `.gz`.
    pub fn save(&self, path: &Path) -> Result<(), LogError> {
        let f = BufWriter::new(File::create(path)?);
        if path.extension().is_some_and(|e| e == "gz") {
            let mut gz = GzEncoder::new(f, Compression::default());
            self.write_jsonl(&mut gz)?;
            gz.finish()?.flush()?;
        } else {
            let mut f = f;
            self.write_jsonl(&mut f)?;
            f.flush()?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LogError> {
        let f = File::open(path)?;
        let r: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
            Box::new(GzDecoder::new(f))
        } else {
            Box::new(f)
        };
        Self::read_jsonl(BufReader::new(r))
    }

    /// Tick-uniform, monotone time and moving flags consistent with the
    /// torso trajectory.
    pub fn check_invariants(&self) -> Result<(), String> {
        let dt = self.dt();
        for (k, w) in self.records.windows(2).enumerate() {
            if w[1].tick != w[0].tick + 1 || ((w[1].t - w[0].t) - dt).abs() > 1e-9 {
                return Err(format!("record {} breaks the tick grid", k + 1));
            }
            let v = (w[1].joints.torso_pos - w[0].joints.torso_pos).abs() / dt;
            if (v > TORSO_MOVING_EPS) != w[1].torso_moving {
                return Err(format!("record {} moving flag disagrees with torso velocity", k + 1));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub total_time: f64,
    pub short_range_time: f64,
    pub long_range_time: f64,
    pub manipulability_mean: f64,
    pub manipulability_min: f64,
    pub torso_motion_time: f64,
    pub torso_motion_fraction: f64,
    pub wrong_selections: u32,
    pub completed_subtasks: usize,
    pub done: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    /// The trial did not reach Done; the partial metrics are attached.
    #[error("trial ended before the task was done ({} sub-tasks completed)", .0.completed_subtasks)]
    PartialTrial(MetricsReport),
}

impl MetricsError {
    pub fn report(&self) -> &MetricsReport {
        match self {
            MetricsError::PartialTrial(r) => r,
        }
    }
}

/// Extract the trial metrics. Each record stands for one tick of length dt;
/// a sub-task lasts from the tick that logs its start to the tick that logs
/// its completion.
pub fn compute_metrics(log: &TrialLog, script: &TaskScript) -> Result<MetricsReport, MetricsError> {
    let dt = log.dt();
    let n = log.records.len();
    let total_time = n as f64 * dt;
    let moving = log.records.iter().filter(|r| r.torso_moving).count();
    let torso_motion_time = moving as f64 * dt;
    let (mut sum, mut min) = (0.0, f64::INFINITY);
    for r in &log.records {
        sum += r.manipulability;
        min = min.min(r.manipulability);
    }
    let mut started: Vec<Option<u64>> = vec![None; script.subtasks.len()];
    let (mut short, mut long, mut completed, mut wrong) = (0.0, 0.0, 0, 0);
    for r in &log.records {
        for e in &r.events {
            match e {
                LogEvent::SubtaskStarted { index } if *index < started.len() => started[*index] = Some(r.tick),
                LogEvent::SubtaskCompleted { index } => {
                    if let Some(Some(t0)) = started.get(*index) {
                        let d = (r.tick - t0) as f64 * dt;
                        match script.subtasks[*index].range_class {
                            RangeClass::ShortRange => short += d,
                            RangeClass::LongRange => long += d,
                        }
                        completed += 1;
                    }
                }
                LogEvent::WrongSelection { .. } => wrong += 1,
                _ => {}
            }
        }
    }
    let done = log.records.last().is_some_and(|r| r.phase == Phase::Done);
    let report = MetricsReport {
        total_time,
        short_range_time: short,
        long_range_time: long,
        manipulability_mean: if n > 0 { sum / n as f64 } else { 0.0 },
        manipulability_min: if n > 0 { min } else { 0.0 },
        torso_motion_time,
        torso_motion_fraction: if n > 0 { moving as f64 / n as f64 } else { 0.0 },
        wrong_selections: wrong,
        completed_subtasks: completed,
        done,
    };
    if done {
        Ok(report)
    } else {
        Err(MetricsError::PartialTrial(report))
    }
}

/// One row of the per-trial table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub mode: Mode,
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub error: Option<String>,
}

pub fn write_trials_csv<W: Write>(w: W, rows: &[TrialRow]) -> Result<(), LogError> {
    let mut c = csv::Writer::from_writer(w);
    c.write_record([
        "mode",
        "seed",
        "done",
        "total_time",
        "short_range_time",
        "long_range_time",
        "manipulability_mean",
        "manipulability_min",
        "torso_motion_time",
        "torso_motion_fraction",
        "wrong_selections",
        "completed_subtasks",
        "error",
    ])
    .map_err(|e| LogError::Format(e.to_string()))?;
    for r in rows {
        let m = &r.metrics;
        c.write_record([
            r.mode.to_string(),
            r.seed.to_string(),
            m.done.to_string(),
            m.total_time.to_string(),
            m.short_range_time.to_string(),
            m.long_range_time.to_string(),
            m.manipulability_mean.to_string(),
            m.manipulability_min.to_string(),
            m.torso_motion_time.to_string(),
            m.torso_motion_fraction.to_string(),
            m.wrong_selections.to_string(),
            m.completed_subtasks.to_string(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(|e| LogError::Format(e.to_string()))?;
    }
    c.flush()?;
    Ok(())
}

pub fn read_trials_csv<R: Read>(r: R) -> Result<Vec<TrialRow>, LogError> {
    let mut c = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in c.records() {
        let rec = rec.map_err(|e| LogError::Format(e.to_string()))?;
        let f = |i: usize| -> Result<f64, LogError> {
            rec.get(i)
                .unwrap_or("")
                .parse()
                .map_err(|_| LogError::Format(format!("column {i}: not a number")))
        };
        let mode = rec
            .get(0)
            .unwrap_or("")
            .parse()
            .map_err(LogError::Format)?;
        rows.push(TrialRow {
            mode,
            seed: f(1)? as u64,
            metrics: MetricsReport {
                done: rec.get(2) == Some("true"),
                total_time: f(3)?,
                short_range_time: f(4)?,
                long_range_time: f(5)?,
                manipulability_mean: f(6)?,
                manipulability_min: f(7)?,
                torso_motion_time: f(8)?,
                torso_motion_fraction: f(9)?,
                wrong_selections: f(10)? as u32,
                completed_subtasks: f(11)? as usize,
            },
            error: rec.get(12).filter(|s| !s.is_empty()).map(str::to_string),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_model;
    use crate::task::{default_task_script, ShelfSpec};

    fn record(tick: u64, torso: f64, moving: bool) -> TickRecord {
        TickRecord {
            tick,
            t: (tick + 1) as f64 * 0.01,
            joints: JointVector::new(torso, [0.0; 7]),
            ee_position: [0.0; 3],
            ee_orientation: [0.0, 0.0, 0.0, 1.0],
            manipulability: 0.05,
            torso_target: torso,
            torso_moving: moving,
            arm_target: [0.0; 3],
            commanded_world_z: 0.0,
            hand_dz: 0.0,
            compensation_applied: 0.0,
            mode: Mode::V,
            phase: Phase::MovingToPick,
            task_index: 0,
            out_of_reach: false,
            events: vec![],
        }
    }

    fn log(moving: &[bool]) -> TrialLog {
        let mut l = TrialLog::new(TrialMeta {
            schema_version: LOG_SCHEMA_VERSION,
            mode: Mode::V,
            seed: 0,
            tick_hz: 100,
            operator: None,
            source: "test".into(),
        });
        let mut z = 0.0;
        for (k, &m) in moving.iter().enumerate() {
            if m {
                z += 0.0005;
            }
            l.records.push(record(k as u64, z, m));
        }
        l
    }

    fn script() -> TaskScript {
        default_task_script(&ShelfSpec::default(), &default_model())
    }

    #[test]
    fn three_moving_ticks_of_ten() {
        let mut m = [false; 10];
        m[2] = true;
        m[3] = true;
        m[7] = true;
        let l = log(&m);
        l.check_invariants().unwrap();
        let r = compute_metrics(&l, &script()).unwrap_err();
        let r = r.report();
        assert!((r.torso_motion_time - 0.03).abs() < 1e-12);
        assert!((r.torso_motion_fraction - 0.3).abs() < 1e-12);
        assert!(!r.done);
    }

    #[test]
    fn zero_and_saturated_motion() {
        let r = *compute_metrics(&log(&[false; 20]), &script()).unwrap_err().report();
        assert_eq!((r.torso_motion_time, r.torso_motion_fraction), (0.0, 0.0));
        let r = *compute_metrics(&log(&[true; 20]), &script()).unwrap_err().report();
        assert_eq!(r.torso_motion_fraction, 1.0);
    }

    #[test]
    fn subtask_time_by_range_class() {
        let mut l = log(&[false; 10]);
        l.records[0].events.push(LogEvent::SubtaskStarted { index: 1 });
        l.records[4].events.push(LogEvent::SubtaskCompleted { index: 1 });
        l.records[5].events.push(LogEvent::SubtaskStarted { index: 2 });
        l.records[6].events.push(LogEvent::SubtaskCompleted { index: 2 });
        l.records[9].phase = Phase::Done;
        let r = compute_metrics(&l, &script()).unwrap();
        assert!((r.long_range_time - 0.04).abs() < 1e-12);
        assert!((r.short_range_time - 0.01).abs() < 1e-12);
        assert!(r.short_range_time + r.long_range_time <= r.total_time);
    }

    #[test]
    fn jsonl_round_trip_and_gzip() {
        let mut l = log(&[true, false, true]);
        l.records[1].events.push(LogEvent::WrongSelection { distance: 0.3 });
        let bytes = l.to_jsonl_bytes();
        assert_eq!(TrialLog::read_jsonl(&bytes[..]).unwrap(), l);
        let dir = std::env::temp_dir().join(format!("tacsim-log-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("t.jsonl.gz");
        l.save(&p).unwrap();
        assert_eq!(TrialLog::load(&p).unwrap(), l);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn csv_round_trip() {
        let r = *compute_metrics(&log(&[true, false]), &script()).unwrap_err().report();
        let rows = vec![TrialRow {
            mode: Mode::RIK,
            seed: 7,
            metrics: r,
            error: Some("watchdog".into()),
        }];
        let mut buf = Vec::new();
        write_trials_csv(&mut buf, &rows).unwrap();
        assert_eq!(read_trials_csv(&buf[..]).unwrap(), rows);
    }
}
