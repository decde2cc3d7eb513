use std::collections::HashSet;

use proptest::prelude::*;

use tacsim::config::default_model;
use tacsim::coordination::Mode;
use tacsim::kinematics::{check_reachable, grasp_orientation, JointVector, Pose, Reachability};
use tacsim::metrics::LogEvent;
use tacsim::sim::{run_trial, SessionConfig};
use tacsim::task::*;

fn default_script() -> (ShelfSpec, TaskScript) {
    let shelf = ShelfSpec::default();
    let script = default_task_script(&shelf, &default_model());
    (shelf, script)
}

#[test]
fn default_script_is_valid_and_balanced() {
    let (shelf, script) = default_script();
    script.validate(&shelf).unwrap();
    assert_eq!(script.subtasks.len(), SUBTASK_COUNT);
    let long = script.subtasks.iter().filter(|s| s.range_class == RangeClass::LongRange).count();
    assert_eq!(long, SUBTASK_COUNT / 2);
    assert_eq!(script.torso_schedule.len(), 2 * SUBTASK_COUNT);
    let (lo, hi) = default_model().torso_range();
    assert!(script.torso_schedule.iter().all(|t| (lo..=hi).contains(t)));
}

#[test]
fn containers_are_conserved() {
    let (shelf, script) = default_script();
    let finals = script.final_slots();
    assert_eq!(finals.len(), script.containers.len());
    assert_eq!(finals.iter().collect::<HashSet<_>>().len(), finals.len());
    // Each pick finds its container where the previous steps left it.
    let mut at: Vec<SlotRef> = script.containers.iter().map(|c| c.slot).collect();
    for (k, s) in script.subtasks.iter().enumerate() {
        assert_eq!(script.pick_slot(k), at[s.pick_container_id]);
        at[s.pick_container_id] = s.place_slot;
        assert!(shelf.grasp_point(s.place_slot).z > 0.0);
    }
    assert_eq!(at, finals);
}

#[test]
fn trial_moves_every_container_to_its_final_slot() {
    let model = default_model();
    let cfg = SessionConfig::new(&model, Mode::TB, 3);
    let out = run_trial(&model, &cfg).unwrap();
    assert!(out.metrics.done);
    let mut released = vec![None; cfg.script.containers.len()];
    let mut attached = 0;
    for r in &out.log.records {
        for e in &r.events {
            match e {
                LogEvent::Attached { .. } => attached += 1,
                LogEvent::Released { container, position } => released[*container] = Some(*position),
                _ => {}
            }
        }
    }
    assert_eq!(attached, SUBTASK_COUNT);
    for (id, slot) in cfg.script.final_slots().iter().enumerate() {
        let want = cfg.shelf.grasp_point(*slot);
        let got = released[id].expect("every container is placed");
        let d = ((got[0] - want.x).powi(2) + (got[1] - want.y).powi(2) + (got[2] - want.z).powi(2)).sqrt();
        assert!(d < cfg.script.confirm_radius, "container {id} released {d} m from its slot");
    }
}

#[test]
fn torso_use_is_mandatory_on_the_default_shelf() {
    let model = default_model();
    let (shelf, script) = default_script();
    let (lo, hi) = model.torso_range();
    let points: Vec<Pose> = (0..SUBTASK_COUNT)
        .flat_map(|k| [script.pick_slot(k), script.subtasks[k].place_slot])
        .map(|s| Pose::new(shelf.grasp_point(s), grasp_orientation()))
        .collect();
    for torso in [lo, 0.5 * (lo + hi), hi] {
        let j = JointVector::new(torso, [0.0; 7]);
        assert!(
            points.iter().any(|p| check_reachable(&model, &j, p) == Reachability::OutOfReach),
            "every target reachable at torso {torso}"
        );
    }
    // Each target is reachable from its scheduled torso height.
    for (leg, p) in points.iter().enumerate() {
        let j = JointVector::new(script.torso_schedule[leg], [0.0; 7]);
        assert_eq!(check_reachable(&model, &j, p), Reachability::Reachable, "leg {leg}");
    }
}

#[test]
fn task_file_round_trips() {
    let (shelf, script) = default_script();
    let f = TaskFile {
        schema_version: TASK_SCHEMA_VERSION,
        shelf,
        script,
    };
    let back = TaskFile::parse(&f.to_toml()).unwrap();
    assert_eq!(back, f);
    let wrong = f.to_toml().replace("schema_version = 1", "schema_version = 9");
    assert!(matches!(TaskFile::parse(&wrong), Err(TaskError::Parse(_))));
}

#[test]
fn invalid_scripts_are_rejected() {
    let (shelf, script) = default_script();
    let mut twice = script.clone();
    twice.subtasks[1].pick_container_id = twice.subtasks[0].pick_container_id;
    assert!(twice.validate(&shelf).is_err());
    let mut short = script.clone();
    short.subtasks.pop();
    assert!(short.validate(&shelf).is_err());
    let mut class = script.clone();
    let s = &mut class.subtasks[0];
    s.range_class = match s.range_class {
        RangeClass::LongRange => RangeClass::ShortRange,
        RangeClass::ShortRange => RangeClass::LongRange,
    };
    assert!(class.validate(&shelf).is_err());
    let mut bad_shelf = shelf.clone();
    bad_shelf.levels.swap(0, 1);
    assert!(matches!(bad_shelf.validate(), Err(TaskError::InvalidShelf(_))));
}

#[test]
fn phase_cycle_of_one_subtask() {
    let r = 0.05;
    let mut t = TaskState::default();
    let steps = [
        (TaskEvent::ReachedTarget, Phase::AwaitConfirmPick),
        (TaskEvent::ConfirmNearTarget { distance: 0.01 }, Phase::AutoPick),
        (TaskEvent::AutoActionDone, Phase::MovingToPlace),
        (TaskEvent::ReachedTarget, Phase::AwaitConfirmPlace),
        (TaskEvent::ConfirmNearTarget { distance: 0.05 }, Phase::AutoPlace),
        (TaskEvent::AutoActionDone, Phase::MovingToPick),
    ];
    for (e, p) in steps {
        t = advance(&t, e, r).unwrap();
        assert_eq!(t.phase, p);
    }
    assert_eq!(t.index, 1);
    assert_eq!(t.leg(), Some(2));
    let wrong = advance(&t, TaskEvent::ConfirmNearTarget { distance: 0.3 }, r).unwrap();
    assert_eq!((wrong.phase, wrong.wrong_selection_count), (Phase::MovingToPick, 1));
    assert!(matches!(
        advance(&t, TaskEvent::AutoActionDone, r),
        Err(TaskError::IllegalTransition { .. })
    ));
}

fn event() -> impl Strategy<Value = TaskEvent> {
    prop_oneof![
        Just(TaskEvent::ReachedTarget),
        (0.0f64..0.1).prop_map(|distance| TaskEvent::ConfirmNearTarget { distance }),
        Just(TaskEvent::AutoActionDone),
        Just(TaskEvent::WrongTarget),
    ]
}

proptest! {
    #[test]
    fn phase_machine_never_skips(events in prop::collection::vec(event(), 0..400)) {
        let mut t = TaskState::default();
        for e in events {
            match advance(&t, e, 0.05) {
                Ok(n) => {
                    prop_assert!(n.index == t.index || n.index == t.index + 1);
                    prop_assert!(n.wrong_selection_count >= t.wrong_selection_count);
                    prop_assert!(n.wrong_selection_count <= t.wrong_selection_count + 1);
                    if n.index == t.index + 1 {
                        prop_assert_eq!(t.phase, Phase::AutoPlace);
                    }
                    if t.phase.is_auto() {
                        prop_assert_eq!(n.wrong_selection_count, t.wrong_selection_count);
                    }
                    t = n;
                }
                Err(_) => prop_assert!(t.phase == Phase::Done || t.phase.is_auto()
                    || matches!(e, TaskEvent::ReachedTarget | TaskEvent::AutoActionDone)),
            }
            prop_assert!(t.index <= SUBTASK_COUNT);
            prop_assert_eq!(t.phase == Phase::Done, t.index == SUBTASK_COUNT);
        }
    }
}
