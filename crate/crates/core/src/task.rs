//! Shelf world, the pick-and-place script and its phase machine.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{check_reachable, grasp_orientation, JointVector, Pose, Reachability, RobotModel};

pub const SUBTASK_COUNT: usize = 12;
pub const LEGS_PER_SUBTASK: usize = 2;
pub const TASK_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("event {event:?} is illegal in phase {phase:?}")]
    IllegalTransition { phase: Phase, event: TaskEvent },
    #[error("invalid shelf: {0}")]
    InvalidShelf(String),
    #[error("invalid task script: {0}")]
    InvalidScript(String),
    #[error("task file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShelfSpec {
    /// Shelf board heights, m, bottom to top.
    pub levels: Vec<f64>,
    /// Lateral slot positions along each board, m.
    pub slot_y: Vec<f64>,
    /// Distance of the container grasp points from the robot column, m.
    pub depth_x: f64,
    /// Grasp point height above the board, m.
    pub grasp_height: f64,
}

impl Default for ShelfSpec {
    fn default() -> Self {
        ShelfSpec {
            levels: vec![0.3, 0.7, 1.1, 1.5],
            slot_y: vec![-0.2, -0.1, 0.0, 0.1, 0.2],
            depth_x: 0.7,
            grasp_height: 0.08,
        }
    }
}

impl ShelfSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.levels.len() != 4 {
            return Err(TaskError::InvalidShelf(format!("expected 4 levels, found {}", self.levels.len())));
        }
        if self.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TaskError::InvalidShelf("levels must be strictly increasing".into()));
        }
        if self.slot_y.is_empty() || self.slot_y.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TaskError::InvalidShelf("slots must be nonempty and increasing".into()));
        }
        if !(self.depth_x > 0.0) || !self.grasp_height.is_finite() {
            return Err(TaskError::InvalidShelf("bad depth or grasp height".into()));
        }
        Ok(())
    }

    pub fn grasp_point(&self, slot: SlotRef) -> Vector3<f64> {
        Vector3::new(
            self.depth_x,
            self.slot_y[slot.slot],
            self.levels[slot.shelf] + self.grasp_height,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SlotRef {
    pub shelf: usize,
    pub slot: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RangeClass {
    ShortRange,
    LongRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubTask {
    pub pick_container_id: usize,
    pub place_slot: SlotRef,
    pub range_class: RangeClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Container {
    pub id: usize,
    pub slot: SlotRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScript {
    pub containers: Vec<Container>,
    pub subtasks: Vec<SubTask>,
    /// Torso target per leg (pick then place for each sub-task), m.
    pub torso_schedule: Vec<f64>,
    pub confirm_radius: f64,
    pub auto_duration: f64,
}

/// Task file: shelf plus script, with a schema version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFile {
    pub schema_version: u32,
    pub shelf: ShelfSpec,
    pub script: TaskScript,
}

impl TaskFile {
    pub fn parse(text: &str) -> Result<Self, TaskError> {
        let f: TaskFile = toml::from_str(text).map_err(|e| TaskError::Parse(e.to_string()))?;
        if f.schema_version != TASK_SCHEMA_VERSION {
            return Err(TaskError::Parse(format!(
                "unsupported schema_version {}",
                f.schema_version
            )));
        }
        f.shelf.validate()?;
        f.script.validate(&f.shelf)?;
        Ok(f)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("task file serializes")
    }
}

fn shelf_distance(a: usize, b: usize) -> usize {
    a.abs_diff(b)
}

/// Pick / place shelf pairs of the default script. Classes alternate short,
/// long; every place shelf is also the next pick shelf.
const DEFAULT_PAIRS: [(usize, usize); SUBTASK_COUNT] = [
    (1, 1),
    (1, 3),
    (3, 2),
    (2, 0),
    (0, 0),
    (0, 2),
    (2, 3),
    (3, 1),
    (1, 0),
    (0, 3),
    (3, 2),
    (2, 0),
];

/// Slot preference: centre first, then alternating outwards.
fn slot_order(n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    let c = (n as f64 - 1.0) / 2.0;
    v.sort_by(|a, b| {
        let da = (*a as f64 - c).abs();
        let db = (*b as f64 - c).abs();
        da.partial_cmp(&db).unwrap().then(a.cmp(b))
    });
    v
}

/// Torso height that puts a grasp point at the arm's nominal centre.
pub fn centered_torso(model: &RobotModel, grasp_z: f64) -> f64 {
    model.clamp_torso(grasp_z - model.base_height() - model.nominal_arm_center_z())
}

/// The fixed 12 sub-task script with an expert torso schedule.
pub fn default_task_script(shelf: &ShelfSpec, model: &RobotModel) -> TaskScript {
    let order = slot_order(shelf.slot_y.len());
    let mut occupied: Vec<Vec<bool>> = vec![vec![false; shelf.slot_y.len()]; shelf.levels.len()];
    let mut containers = Vec::with_capacity(SUBTASK_COUNT);
    for (id, &(pick, _)) in DEFAULT_PAIRS.iter().enumerate() {
        let slot = *order
            .iter()
            .find(|s| !occupied[pick][**s])
            .expect("default shelf has room for the initial containers");
        occupied[pick][slot] = true;
        containers.push(Container {
            id,
            slot: SlotRef { shelf: pick, slot },
        });
    }
    let mut subtasks = Vec::with_capacity(SUBTASK_COUNT);
    let mut torso_schedule = Vec::with_capacity(SUBTASK_COUNT * LEGS_PER_SUBTASK);
    for (id, &(pick, place)) in DEFAULT_PAIRS.iter().enumerate() {
        let from = containers[id].slot;
        occupied[from.shelf][from.slot] = false;
        let slot = *order
            .iter()
            .find(|s| !occupied[place][**s] && !(place == from.shelf && **s == from.slot))
            .expect("default shelf has a free slot for every placement");
        occupied[place][slot] = true;
        let range_class = if shelf_distance(pick, place) >= 2 {
            RangeClass::LongRange
        } else {
            RangeClass::ShortRange
        };
        subtasks.push(SubTask {
            pick_container_id: id,
            place_slot: SlotRef { shelf: place, slot },
            range_class,
        });
        torso_schedule.push(centered_torso(model, shelf.grasp_point(from).z));
        torso_schedule.push(centered_torso(model, shelf.grasp_point(SlotRef { shelf: place, slot }).z));
    }
    TaskScript {
        containers,
        subtasks,
        torso_schedule,
        confirm_radius: 0.05,
        auto_duration: 2.0,
    }
}

impl TaskScript {
    pub fn validate(&self, shelf: &ShelfSpec) -> Result<(), TaskError> {
        let bad = |m: String| Err(TaskError::InvalidScript(m));
        if self.subtasks.len() != SUBTASK_COUNT {
            return bad(format!("expected {SUBTASK_COUNT} sub-tasks, found {}", self.subtasks.len()));
        }
        let long = self
            .subtasks
            .iter()
            .filter(|s| s.range_class == RangeClass::LongRange)
            .count();
        if long != SUBTASK_COUNT / 2 {
            return bad(format!("expected a balanced mix, found {long} long-range sub-tasks"));
        }
        if self.torso_schedule.len() != SUBTASK_COUNT * LEGS_PER_SUBTASK {
            return bad("torso schedule must cover every leg".into());
        }
        if !(self.confirm_radius > 0.0) || !(self.auto_duration > 0.0) {
            return bad("confirm radius and auto duration must be positive".into());
        }
        let in_shelf = |s: &SlotRef| s.shelf < shelf.levels.len() && s.slot < shelf.slot_y.len();
        let mut occupied = std::collections::HashSet::new();
        for (i, c) in self.containers.iter().enumerate() {
            if c.id != i || !in_shelf(&c.slot) || !occupied.insert(c.slot) {
                return bad(format!("container {i} is invalid or overlaps another"));
            }
        }
        let mut picked = vec![false; self.containers.len()];
        let mut at: Vec<SlotRef> = self.containers.iter().map(|c| c.slot).collect();
        for (k, s) in self.subtasks.iter().enumerate() {
            let Some(p) = picked.get_mut(s.pick_container_id) else {
                return bad(format!("sub-task {k} picks unknown container"));
            };
            if *p {
                return bad(format!("sub-task {k} picks a container twice"));
            }
            *p = true;
            let from = at[s.pick_container_id];
            occupied.remove(&from);
            if !in_shelf(&s.place_slot) || !occupied.insert(s.place_slot) {
                return bad(format!("sub-task {k} places into an occupied or unknown slot"));
            }
            at[s.pick_container_id] = s.place_slot;
            let span = shelf_distance(from.shelf, s.place_slot.shelf);
            let class_ok = match s.range_class {
                RangeClass::LongRange => span >= 2,
                RangeClass::ShortRange => span <= 1,
            };
            if !class_ok {
                return bad(format!("sub-task {k} range class does not match its span"));
            }
        }
        Ok(())
    }

    /// Slot a container occupies before sub-task `k` runs.
    pub fn pick_slot(&self, k: usize) -> SlotRef {
        let id = self.subtasks[k].pick_container_id;
        let mut slot = self.containers[id].slot;
        for s in &self.subtasks[..k] {
            if s.pick_container_id == id {
                slot = s.place_slot;
            }
        }
        slot
    }

    /// Final slot of every container after the whole script.
    pub fn final_slots(&self) -> Vec<SlotRef> {
        let mut at: Vec<SlotRef> = self.containers.iter().map(|c| c.slot).collect();
        for s in &self.subtasks {
            at[s.pick_container_id] = s.place_slot;
        }
        at
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    MovingToPick,
    AwaitConfirmPick,
    AutoPick,
    MovingToPlace,
    AwaitConfirmPlace,
    AutoPlace,
    Done,
}

impl Phase {
    pub fn is_auto(&self) -> bool {
        matches!(self, Phase::AutoPick | Phase::AutoPlace)
    }

    pub fn is_pick(&self) -> bool {
        matches!(self, Phase::MovingToPick | Phase::AwaitConfirmPick | Phase::AutoPick)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TaskEvent {
    /// The end effector entered the confirm radius of the cue.
    ReachedTarget,
    ConfirmNearTarget { distance: f64 },
    AutoActionDone,
    WrongTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskState {
    pub index: usize,
    pub phase: Phase,
    pub wrong_selection_count: u32,
}

impl Default for TaskState {
    fn default() -> Self {
        TaskState {
            index: 0,
            phase: Phase::MovingToPick,
            wrong_selection_count: 0,
        }
    }
}

impl TaskState {
    /// Leg index (pick or place of the current sub-task), `None` when done.
    pub fn leg(&self) -> Option<usize> {
        match self.phase {
            Phase::Done => None,
            p if p.is_pick() => Some(self.index * LEGS_PER_SUBTASK),
            _ => Some(self.index * LEGS_PER_SUBTASK + 1),
        }
    }
}

/// Phase machine. A confirm outside `confirm_radius` counts as a wrong
/// selection and leaves the phase unchanged.
pub fn advance(task: &TaskState, event: TaskEvent, confirm_radius: f64) -> Result<TaskState, TaskError> {
    use Phase::*;
    let mut next = *task;
    let illegal = || TaskError::IllegalTransition {
        phase: task.phase,
        event,
    };
    match (task.phase, event) {
        (Done, _) => return Err(illegal()),
        (MovingToPick, TaskEvent::ReachedTarget) => next.phase = AwaitConfirmPick,
        (MovingToPlace, TaskEvent::ReachedTarget) => next.phase = AwaitConfirmPlace,
        (AwaitConfirmPick, TaskEvent::ConfirmNearTarget { distance }) if distance <= confirm_radius => {
            next.phase = AutoPick
        }
        (AwaitConfirmPlace, TaskEvent::ConfirmNearTarget { distance }) if distance <= confirm_radius => {
            next.phase = AutoPlace
        }
        (p, TaskEvent::ConfirmNearTarget { .. }) | (p, TaskEvent::WrongTarget) if !p.is_auto() => {
            next.wrong_selection_count += 1
        }
        (AutoPick, TaskEvent::AutoActionDone) => next.phase = MovingToPlace,
        (AutoPlace, TaskEvent::AutoActionDone) => {
            if task.index + 1 >= SUBTASK_COUNT {
                next.index = SUBTASK_COUNT;
                next.phase = Done;
            } else {
                next.index += 1;
                next.phase = MovingToPick;
            }
        }
        _ => return Err(illegal()),
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cue {
    pub target_id: usize,
    pub world_position: [f64; 3],
    pub out_of_reach: bool,
}

/// Cue for the current phase: the container to pick, or the slot to fill.
pub fn cue_for(
    task: &TaskState,
    script: &TaskScript,
    shelf: &ShelfSpec,
    model: &RobotModel,
    joints: &JointVector,
) -> Option<Cue> {
    if task.phase == Phase::Done {
        return None;
    }
    let sub = &script.subtasks[task.index];
    let slot = if task.phase.is_pick() {
        script.pick_slot(task.index)
    } else {
        sub.place_slot
    };
    let p = shelf.grasp_point(slot);
    let target = Pose::new(p, grasp_orientation());
    Some(Cue {
        target_id: sub.pick_container_id,
        world_position: [p.x, p.y, p.z],
        out_of_reach: check_reachable(model, joints, &target) == Reachability::OutOfReach,
    })
}

/// Live container positions and attachment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskWorld {
    pub positions: Vec<[f64; 3]>,
    pub attached: Option<usize>,
}

impl TaskWorld {
    pub fn new(script: &TaskScript, shelf: &ShelfSpec) -> Self {
        TaskWorld {
            positions: script
                .containers
                .iter()
                .map(|c| {
                    let p = shelf.grasp_point(c.slot);
                    [p.x, p.y, p.z]
                })
                .collect(),
            attached: None,
        }
    }

    /// Attached containers ride rigidly with the end effector.
    pub fn follow(&mut self, ee: &Vector3<f64>) {
        if let Some(id) = self.attached {
            self.positions[id] = [ee.x, ee.y, ee.z];
        }
    }
}

/// Scripted auto action: approach the grasp point, dwell, retreat to the
/// pose held when the operator confirmed. Returns the world EE target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoAction {
    pub start: Pose,
    pub grasp: Pose,
    pub t0: f64,
    pub duration: f64,
    pub pick: bool,
    pub container: usize,
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

impl AutoAction {
    pub const APPROACH: f64 = 0.4;
    pub const DWELL: f64 = 0.2;

    /// Fraction of the duration at which the container is attached or released.
    pub const SWITCH_AT: f64 = Self::APPROACH + 0.5 * Self::DWELL;

    pub fn target(&self, t: f64) -> Pose {
        let u = ((t - self.t0) / self.duration).clamp(0.0, 1.0);
        let a = Self::APPROACH;
        let s = if u < a {
            smoothstep(u / a)
        } else if u < a + Self::DWELL {
            1.0
        } else {
            1.0 - smoothstep((u - a - Self::DWELL) / (1.0 - a - Self::DWELL))
        };
        let p = self.start.position + (self.grasp.position - self.start.position) * s;
        Pose::new(p, self.grasp.orientation)
    }

    pub fn switched(&self, t: f64) -> bool {
        t - self.t0 >= Self::SWITCH_AT * self.duration - 1e-9
    }

    pub fn finished(&self, t: f64) -> bool {
        t - self.t0 >= self.duration - 1e-9
    }
}

/// Build the auto action for the current phase.
pub fn auto_pick_place(
    task: &TaskState,
    script: &TaskScript,
    shelf: &ShelfSpec,
    ee: &Pose,
    t: f64,
) -> Option<AutoAction> {
    if !task.phase.is_auto() {
        return None;
    }
    let sub = &script.subtasks[task.index];
    let pick = task.phase == Phase::AutoPick;
    let slot = if pick { script.pick_slot(task.index) } else { sub.place_slot };
    Some(AutoAction {
        start: Pose::new(ee.position, grasp_orientation()),
        grasp: Pose::new(shelf.grasp_point(slot), grasp_orientation()),
        t0: t,
        duration: script.auto_duration,
        pick,
        container: sub.pick_container_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_model;

    fn script() -> (ShelfSpec, TaskScript) {
        let shelf = ShelfSpec::default();
        let s = default_task_script(&shelf, &default_model());
        (shelf, s)
    }

    #[test]
    fn default_script_is_valid_and_balanced() {
        let (shelf, s) = script();
        s.validate(&shelf).unwrap();
        for (k, sub) in s.subtasks.iter().enumerate() {
            let expect = if k % 2 == 0 {
                RangeClass::ShortRange
            } else {
                RangeClass::LongRange
            };
            assert_eq!(sub.range_class, expect);
            if sub.range_class == RangeClass::LongRange {
                let from = shelf.grasp_point(s.pick_slot(k)).z;
                let to = shelf.grasp_point(sub.place_slot).z;
                assert!((from - to).abs() >= 0.8 - 1e-9);
            }
        }
        assert_eq!(s, default_task_script(&shelf, &default_model()));
    }

    #[test]
    fn phase_machine_walks_one_subtask() {
        let t = TaskState::default();
        let t = advance(&t, TaskEvent::ReachedTarget, 0.05).unwrap();
        assert_eq!(t.phase, Phase::AwaitConfirmPick);
        let far = advance(&t, TaskEvent::ConfirmNearTarget { distance: 0.2 }, 0.05).unwrap();
        assert_eq!(far.phase, Phase::AwaitConfirmPick);
        assert_eq!(far.wrong_selection_count, 1);
        let t = advance(&t, TaskEvent::ConfirmNearTarget { distance: 0.01 }, 0.05).unwrap();
        assert_eq!(t.phase, Phase::AutoPick);
        assert!(advance(&t, TaskEvent::ReachedTarget, 0.05).is_err());
        let t = advance(&t, TaskEvent::AutoActionDone, 0.05).unwrap();
        assert_eq!(t.phase, Phase::MovingToPlace);
    }

    #[test]
    fn last_place_finishes_the_task() {
        let t = TaskState {
            index: 11,
            phase: Phase::AutoPlace,
            wrong_selection_count: 0,
        };
        let t = advance(&t, TaskEvent::AutoActionDone, 0.05).unwrap();
        assert_eq!(t.phase, Phase::Done);
        assert!(advance(&t, TaskEvent::AutoActionDone, 0.05).is_err());
    }

    #[test]
    fn task_file_round_trips() {
        let (shelf, script) = script();
        let f = TaskFile {
            schema_version: TASK_SCHEMA_VERSION,
            shelf,
            script,
        };
        assert_eq!(TaskFile::parse(&f.to_toml()).unwrap(), f);
    }

    #[test]
    fn auto_action_timing() {
        let (shelf, s) = script();
        let task = TaskState {
            index: 0,
            phase: Phase::AutoPick,
            wrong_selection_count: 0,
        };
        let ee = Pose::new(Vector3::new(0.66, 0.0, 0.9), grasp_orientation());
        let a = auto_pick_place(&task, &s, &shelf, &ee, 10.0).unwrap();
        assert!((a.target(10.0).position - ee.position).norm() < 1e-12);
        let mid = 10.0 + AutoAction::SWITCH_AT * a.duration;
        assert!((a.target(mid).position - a.grasp.position).norm() < 1e-12);
        assert!((a.target(12.0).position - ee.position).norm() < 1e-12);
        assert!(a.finished(12.0) && !a.finished(11.99));
    }
}
