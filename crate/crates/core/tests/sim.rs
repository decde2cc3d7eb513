use tacsim::config::default_model;
use tacsim::coordination::{ControlFrame, JoystickEdge, Mode};
use tacsim::metrics::{compute_metrics, LogEvent, TrialLog};
use tacsim::operator::InputTrace;
use tacsim::sim::*;
use tacsim::task::{Phase, SUBTASK_COUNT};

fn interactive(mode: Mode, seed: u64) -> Session {
    let model = default_model();
    let mut cfg = SessionConfig::new(&model, mode, seed);
    cfg.operator = OperatorSource::Interactive;
    Session::new(model, cfg).unwrap()
}

fn idle_frame(s: &Session) -> ControlFrame {
    ControlFrame {
        hand_pos_abs: s.hand_start(),
        ..ControlFrame::idle(s.time())
    }
}

#[test]
fn zero_input_is_a_fixed_point() {
    for mode in Mode::ALL {
        let mut s = interactive(mode, 1);
        let f = idle_frame(&s);
        // Transients: the smoothness history fills, and the automatic modes
        // finish their initial torso moves.
        for _ in 0..1500 {
            s.tick(&f).unwrap();
        }
        let j0 = *s.joints();
        let c0 = s.commanded_ee();
        for _ in 0..300 {
            s.tick(&f).unwrap();
        }
        assert_eq!(*s.joints(), j0, "{mode}");
        assert_eq!(s.commanded_ee(), c0, "{mode}");
        assert_eq!(s.task().phase, Phase::MovingToPick);
        assert!(s.log().records.iter().rev().take(300).all(|r| !r.torso_moving));
    }
}

fn torso_trajectory(mode: Mode, frame_at: impl Fn(u64) -> ControlFrame, ticks: u64) -> Vec<f64> {
    let mut s = interactive(mode, 2);
    let mut out = vec![s.joints().torso_pos];
    for k in 0..ticks {
        let mut f = frame_at(k);
        f.hand_pos_abs = s.hand_start();
        s.tick(&f).unwrap();
        out.push(s.joints().torso_pos);
    }
    out
}

fn check_rate_limited_climb(traj: &[f64], mode: Mode) {
    let model = default_model();
    let (lo, hi) = model.torso_range();
    let step = model.torso_velocity_limit() / 100.0;
    assert!((step - 0.0005).abs() < 1e-15);
    assert_eq!(traj[0], lo, "{mode} starts at the bottom");
    for w in traj.windows(2) {
        assert!(w[1] - w[0] <= step + 1e-12, "{mode}: torso stepped {}", w[1] - w[0]);
        assert!(w[1] >= w[0] - 1e-12);
    }
    let arrive = traj.iter().position(|z| *z >= hi - 1e-9).unwrap_or_else(|| panic!("{mode} stalls at {}", traj.last().unwrap()));
    assert_eq!(arrive, 800, "{mode}: 0.4 m at 0.0005 m per tick");
}

#[test]
fn torso_jump_is_rate_limited() {
    // Full joystick in velocity mode.
    let traj = torso_trajectory(
        Mode::V,
        |k| ControlFrame {
            joystick_y: 1.0,
            ..ControlFrame::idle(k as f64 * 0.01)
        },
        900,
    );
    check_rate_limited_climb(&traj, Mode::V);
    // Two preset edges, the second as the first preset is reached.
    let traj = torso_trajectory(
        Mode::PH,
        |k| ControlFrame {
            joystick_edge: if k == 0 || k == 400 { JoystickEdge::Up } else { JoystickEdge::None },
            ..ControlFrame::idle(k as f64 * 0.01)
        },
        900,
    );
    check_rate_limited_climb(&traj, Mode::PH);
}

#[test]
fn trials_are_deterministic_and_replayable() {
    let model = default_model();
    for mode in [Mode::C, Mode::RIK] {
        let cfg = SessionConfig::new(&model, mode, 17);
        let a = run_trial(&model, &cfg).unwrap();
        let b = run_trial(&model, &cfg).unwrap();
        assert_eq!(a.log.to_jsonl_bytes(), b.log.to_jsonl_bytes());
        assert!(!a.partial && a.metrics.done);
        let r = replay_trace(&model, &cfg, &a.trace).unwrap();
        assert_eq!(r.log.records, a.log.records);
        assert_eq!(r.metrics, a.metrics);
    }
}

#[test]
fn different_seeds_differ() {
    let model = default_model();
    let a = run_trial(&model, &SessionConfig::new(&model, Mode::P, 1)).unwrap();
    let b = run_trial(&model, &SessionConfig::new(&model, Mode::P, 2)).unwrap();
    assert_ne!(a.log.records, b.log.records);
}

#[test]
fn truncated_trace_gives_partial_metrics() {
    let model = default_model();
    let cfg = SessionConfig::new(&model, Mode::PH, 4);
    let full = run_trial(&model, &cfg).unwrap();
    let mut trace = full.trace.clone();
    trace.frames.truncate(trace.frames.len() / 2);
    let r = replay_trace(&model, &cfg, &trace).unwrap();
    assert!(r.partial);
    assert!(!r.metrics.done);
    assert!(r.metrics.completed_subtasks < SUBTASK_COUNT);
    assert_eq!(r.log.records.len(), trace.frames.len());
    let last = r.log.records.last().unwrap();
    assert!(matches!(last.events.last(), Some(LogEvent::TrialEnded { done: false, .. })));
    // The prefix matches the full run tick for tick.
    assert_eq!(r.log.records[..10], full.log.records[..10]);
}

#[test]
fn replay_rejects_mismatched_mode() {
    let model = default_model();
    let cfg = SessionConfig::new(&model, Mode::V, 4);
    let mut trace = InputTrace::new(tacsim::operator::TraceMeta {
        schema_version: tacsim::operator::TRACE_SCHEMA_VERSION,
        mode: Mode::S,
        seed: 4,
        tick_hz: 100,
        operator: None,
    });
    trace.record(ControlFrame::idle(0.0));
    assert!(replay_trace(&model, &cfg, &trace).is_err());
}

#[test]
fn mode_switch_is_logged_and_takes_effect() {
    let mut s = interactive(Mode::V, 3);
    for _ in 0..5 {
        s.tick(&idle_frame(&s)).unwrap();
    }
    s.switch_mode(Mode::C);
    s.switch_mode(Mode::C);
    let snap = s.tick(&idle_frame(&s)).unwrap();
    assert_eq!(snap.mode, Mode::C);
    let r = s.log().records.last().unwrap();
    assert_eq!(r.mode, Mode::C);
    let switches: Vec<_> = s
        .log()
        .records
        .iter()
        .flat_map(|r| &r.events)
        .filter(|e| matches!(e, LogEvent::ModeSwitched { .. }))
        .collect();
    assert_eq!(switches, vec![&LogEvent::ModeSwitched { from: Mode::V, to: Mode::C }]);
}

#[test]
fn invalid_frames_are_logged_and_ignored() {
    let mut s = interactive(Mode::V, 3);
    let j0 = *s.joints();
    let bad = ControlFrame {
        joystick_y: 3.0,
        ..idle_frame(&s)
    };
    s.tick(&bad).unwrap();
    assert_eq!(s.joints().torso_pos, j0.torso_pos);
    let ev = &s.log().records[0].events;
    assert!(ev.iter().any(|e| matches!(e, LogEvent::Error { source, .. } if source == "input")));
}

#[test]
fn ended_session_rejects_ticks() {
    let mut s = interactive(Mode::V, 3);
    s.tick(&idle_frame(&s)).unwrap();
    s.end("stop");
    assert!(s.is_ended());
    assert!(matches!(s.tick(&idle_frame(&s)), Err(SimError::Ended)));
}

#[test]
fn confirm_away_from_target_is_a_wrong_selection() {
    let mut s = interactive(Mode::V, 3);
    let f = ControlFrame {
        confirm_pressed: true,
        ..idle_frame(&s)
    };
    s.tick(&f).unwrap();
    assert_eq!(s.running_metrics().wrong_selections, 1);
    assert_eq!(s.task().phase, Phase::MovingToPick);
    assert!(s.log().records[0].events.iter().any(|e| matches!(e, LogEvent::WrongSelection { .. })));
}

#[test]
fn watchdog_ends_a_stalled_trial() {
    let model = default_model();
    let mut cfg = SessionConfig::new(&model, Mode::V, 3);
    cfg.operator = OperatorSource::Interactive;
    cfg.watchdog_s = 1.0;
    let mut s = Session::new(model, cfg).unwrap();
    let mut n = 0;
    while !s.is_ended() && n < 1000 {
        s.tick(&idle_frame(&s)).unwrap();
        n += 1;
    }
    assert!(s.is_ended());
    assert!((99..=101).contains(&n), "ended after {n} ticks");
    assert_eq!(s.ended().map(|e| e.0), Some(false));
}

#[test]
fn saved_log_round_trips_and_recomputes() {
    let model = default_model();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = SessionConfig::new(&model, Mode::TB, 8);
    let path = dir.path().join("t.jsonl.gz");
    cfg.log_path = Some(path.clone());
    let out = run_trial(&model, &cfg).unwrap();
    let back = TrialLog::load(&path).unwrap();
    assert_eq!(back, out.log);
    back.check_invariants().unwrap();
    assert_eq!(compute_metrics(&back, &cfg.script).unwrap(), out.metrics);
    // Plain JSONL when the extension is not .gz.
    let plain = dir.path().join("t.jsonl");
    out.log.save(&plain).unwrap();
    assert_eq!(std::fs::read(&plain).unwrap(), out.log.to_jsonl_bytes());
}

#[test]
fn invalid_config_is_rejected() {
    let model = default_model();
    let mut cfg = SessionConfig::new(&model, Mode::V, 0);
    cfg.tick_hz = 60;
    assert!(matches!(Session::new(model.clone(), cfg), Err(SimError::Config(_))));
    let mut cfg = SessionConfig::new(&model, Mode::V, 0);
    cfg.watchdog_s = 0.0;
    assert!(Session::new(model.clone(), cfg).is_err());
    let mut cfg = SessionConfig::new(&model, Mode::V, 0);
    cfg.operator = OperatorSource::Interactive;
    assert!(run_trial(&model, &cfg).is_err());
}

#[test]
fn fifty_hz_trial_completes() {
    let model = default_model();
    let mut cfg = SessionConfig::new(&model, Mode::S, 2);
    cfg.tick_hz = 50;
    let out = run_trial(&model, &cfg).unwrap();
    assert!(out.metrics.done);
    assert_eq!(out.log.meta.tick_hz, 50);
}

#[test]
fn batch_report_and_tables() {
    let model = default_model();
    let cfg = SessionConfig::new(&model, Mode::V, 0);
    let seeds = [batch_seed(1, 0), batch_seed(1, 1), batch_seed(1, 2)];
    let report = run_batch(&model, &cfg, &[Mode::P, Mode::S], &seeds).unwrap();
    assert_eq!(report.rows.len(), 6);
    assert_eq!(report.trials_per_mode, 3);
    assert_eq!(report.comparisons.len(), COMPARED_METRICS.len());
    let rows: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.mode == Mode::S)
        .map(|r| r.metrics.total_time)
        .collect();
    assert_eq!(report.median("total_time", Mode::S), Some(tacsim::stats::median(&rows)));
    let mut stats = Vec::new();
    write_stats_csv(&mut stats, &report.comparisons).unwrap();
    let stats = String::from_utf8(stats).unwrap();
    assert!(stats.starts_with("metric,mode,median,h,df,p\n"));
    assert_eq!(stats.lines().count(), 1 + 2 * COMPARED_METRICS.len());
    let mut pw = Vec::new();
    write_pairwise_csv(&mut pw, &report.modes, &report.comparisons).unwrap();
    let pw = String::from_utf8(pw).unwrap();
    assert!(pw.starts_with("metric,mode_a,mode_b,z,p_raw,p_adjusted\n"));
    assert_eq!(pw.lines().count(), 1 + COMPARED_METRICS.len());
    assert!(analyze(&report.rows, &[Mode::P]).unwrap().is_empty());
}
