use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tacsim::config::default_model;
use tacsim::ik::*;
use tacsim::kinematics::*;

fn interior_joints(model: &RobotModel, rng: &mut ChaCha8Rng) -> JointVector {
    let q = std::array::from_fn(|i| {
        let [lo, hi] = model.joint(i).limits;
        let mid = 0.5 * (lo + hi);
        let half = (0.5 * (hi - lo)).min(std::f64::consts::PI);
        mid + rng.random_range(-0.85..0.85) * half
    });
    let (lo, hi) = model.torso_range();
    JointVector::new(rng.random_range(lo..hi), q)
}

/// Targets are FK images of collision-free interior configurations, so each
/// one is reachable by construction.
fn reachable_target(model: &RobotModel, rng: &mut ChaCha8Rng) -> (JointVector, Pose) {
    loop {
        let j = interior_joints(model, rng);
        let target = model.pose_unchecked(&j);
        let p = IkProblem {
            model,
            target,
            weights: IkWeights::default(),
            include_torso: false,
            fixed_torso: j.torso_pos,
        };
        if p.residuals(&j.arm_q, &IkState::default()).unwrap().self_collision == 0.0 {
            return (j, target);
        }
    }
}

#[test]
fn solves_random_reachable_targets() {
    let model = default_model();
    let w = IkWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 1000;
    let mut solved = 0;
    for _ in 0..n {
        let (j, target) = reachable_target(&model, &mut rng);
        let seed: [f64; ARM_DOF] = std::array::from_fn(|i| j.arm_q[i] + rng.random_range(-0.5..0.5));
        let start = model.clamp(&JointVector::new(j.torso_pos, seed));
        let mut state = IkState::default();
        let r = best_effort(solve_arm_ik(&model, &mut state, &start, &target, &w)).unwrap();
        assert!(r.iterations <= state.max_iterations);
        // The reported errors agree with an FK check of the returned joints.
        let pose = model.pose_unchecked(&r.solution);
        let pe = (pose.position - target.position).norm();
        let re = pose.orientation.angle_to(&target.orientation);
        assert!((pe - r.position_error).abs() < 1e-9 && (re - r.rotation_error).abs() < 1e-9);
        assert!(model.check_limits(&r.solution).is_ok());
        if pe <= 2e-3 && re <= 1f64.to_radians() {
            solved += 1;
        }
    }
    let rate = solved as f64 / n as f64;
    assert!(rate >= 0.95, "solved {solved}/{n}");
}

#[test]
fn integrated_solve_uses_the_torso() {
    let model = default_model();
    let w = IkWeights::default();
    // A high target, near the edge of the arm's workspace at the lowest torso height.
    let start = JointVector::new(0.0, [0.0, 0.6, 0.0, 1.6, 0.0, 0.9, 1.57]);
    let target = Pose::new(nalgebra::Vector3::new(0.65, 0.0, 1.45), grasp_orientation());
    let mut locked = IkState::default();
    let arm = best_effort(solve_integrated_ik_torso_locked(&model, &mut locked, &start, &target, &w)).unwrap();
    assert_eq!(arm.solution.torso_pos, 0.0);
    let mut free = IkState::default();
    let full = best_effort(solve_integrated_ik(&model, &mut free, &start, &target, &w)).unwrap();
    assert!(full.solution.torso_pos > 0.0);
    // The extra variable can only help the objective.
    assert!(arm.converged && full.converged);
    assert!(full.objective_value <= arm.objective_value, "{arm:?} {full:?}");
}

#[test]
fn invalid_inputs_are_rejected() {
    let model = default_model();
    let w = IkWeights::default();
    let start = JointVector::new(0.1, [0.0; ARM_DOF]);
    let mut target = Pose::new(nalgebra::Vector3::new(0.7, 0.0, 1.0), grasp_orientation());
    target.position.x = f64::NAN;
    let mut st = IkState::default();
    assert!(matches!(solve_arm_ik(&model, &mut st, &start, &target, &w), Err(IkError::InvalidInput(_))));
    let p = IkProblem {
        model: &model,
        target: Pose::new(nalgebra::Vector3::new(0.7, 0.0, 1.0), grasp_orientation()),
        weights: w,
        include_torso: true,
        fixed_torso: 0.1,
    };
    assert!(matches!(objective(&p, &[0.0; 7], &st), Err(IkError::DimensionMismatch { expected: 8, found: 7 })));
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let model = default_model();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let (_, target) = reachable_target(&model, &mut rng);
        let mut state = IkState::default();
        // Fill part of the smoothness history on most cases.
        for _ in 0..case % 4 {
            state.push(&interior_joints(&model, &mut rng));
        }
        let include_torso = case % 2 == 1;
        let j = interior_joints(&model, &mut rng);
        let p = IkProblem {
            model: &model,
            target,
            weights: IkWeights::default(),
            include_torso,
            fixed_torso: j.torso_pos,
        };
        let x: Vec<f64> = if include_torso { j.to_array().to_vec() } else { j.arm_q.to_vec() };
        let (f, g) = objective_gradient(&p, &x, &state).unwrap();
        assert!((f - objective(&p, &x, &state).unwrap()).abs() <= 1e-12 * f.abs().max(1.0));
        let fd: Vec<f64> = (0..x.len())
            .map(|i| {
                let mut a = x.clone();
                a[i] += h;
                let mut b = x.clone();
                b[i] -= h;
                (objective(&p, &a, &state).unwrap() - objective(&p, &b, &state).unwrap()) / (2.0 * h)
            })
            .collect();
        let scale = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
        for (a, b) in g.iter().zip(&fd) {
            worst = worst.max((a - b).abs() / scale);
        }
    }
    assert!(worst <= 1e-5, "worst relative gradient error {worst:e}");
}
