//! Acceptance suite: one PASS/FAIL line per criterion. Runs as a plain
//! binary so the lines always reach the test output.

use std::path::Path;
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tacsim::config::default_model;
use tacsim::coordination::Mode;
use tacsim::ik::*;
use tacsim::kinematics::*;
use tacsim::metrics::{TrialLog, TrialRow};
use tacsim::operator::InputTrace;
use tacsim::sim::*;
use tacsim::stats::{kruskal_wallis, median, midranks};
use tacsim::task::SUBTASK_COUNT;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, name: &str, ok: bool, detail: String) {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed += 1;
        }
    }
}

fn random_joints(model: &RobotModel, rng: &mut ChaCha8Rng, spread: f64) -> JointVector {
    let q = std::array::from_fn(|i| {
        let [lo, hi] = model.joint(i).limits;
        let mid = 0.5 * (lo + hi);
        let half = (0.5 * (hi - lo)).min(std::f64::consts::PI);
        mid + rng.random_range(-spread..spread) * half
    });
    let (lo, hi) = model.torso_range();
    JointVector::new(rng.random_range(lo..hi), q)
}

fn rotation_vector(r: &Matrix3<f64>) -> Vector3<f64> {
    let angle = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if angle < 1e-12 {
        w / 2.0
    } else {
        w * (angle / (2.0 * angle.sin()))
    }
}

fn kinematics(rep: &mut Report) {
    let t0 = Instant::now();
    let model = default_model();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let h = 1e-6;
    let mut jac_err: f64 = 0.0;
    for _ in 0..1000 {
        let j = random_joints(&model, &mut rng, 1.0);
        let jac = model.jacobian_unchecked(&j);
        for k in 0..ARM_DOF {
            let (mut a, mut b) = (j, j);
            a.arm_q[k] += h;
            b.arm_q[k] -= h;
            let (pa, pb) = (model.pose_unchecked(&a), model.pose_unchecked(&b));
            let lin = (pa.position - pb.position) / (2.0 * h);
            let ra = *pa.orientation.to_rotation_matrix().matrix();
            let rb = *pb.orientation.to_rotation_matrix().matrix();
            let ang = rotation_vector(&(ra * rb.transpose())) / (2.0 * h);
            for r in 0..3 {
                jac_err = jac_err.max((jac[(r, k)] - lin[r]).abs()).max((jac[(r + 3, k)] - ang[r]).abs());
            }
        }
    }
    let mut man_err: f64 = 0.0;
    for i in 0..50 {
        let j = if i % 2 == 0 {
            model.jacobian_unchecked(&random_joints(&model, &mut rng, 1.0))
        } else {
            JacobianMatrix::from_fn(|_, _| rng.random_range(-1.0..1.0))
        };
        let oracle: f64 = j.svd(false, false).singular_values.iter().product();
        man_err = man_err.max((manipulability_index(&j) - oracle).abs() / oracle);
    }
    let secs = t0.elapsed().as_secs_f64();
    rep.line(
        "kinematics",
        jac_err <= 1e-6 && man_err <= 1e-9 && secs < 10.0,
        format!("jacobian max abs err {jac_err:.2e} (<= 1e-6), manipulability rel err {man_err:.2e} (<= 1e-9), {secs:.2} s (< 10 s)"),
    );
}

fn ik(rep: &mut Report) {
    let t0 = Instant::now();
    let model = default_model();
    let w = IkWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut solved, mut n) = (0, 0);
    while n < 1000 {
        let j = random_joints(&model, &mut rng, 0.85);
        let target = model.pose_unchecked(&j);
        let p = IkProblem {
            model: &model,
            target,
            weights: w,
            include_torso: false,
            fixed_torso: j.torso_pos,
        };
        if p.residuals(&j.arm_q, &IkState::default()).unwrap().self_collision > 0.0 {
            continue;
        }
        n += 1;
        let seed: [f64; ARM_DOF] = std::array::from_fn(|i| j.arm_q[i] + rng.random_range(-0.5..0.5));
        let start = model.clamp(&JointVector::new(j.torso_pos, seed));
        let mut st = IkState::default();
        let r = best_effort(solve_arm_ik(&model, &mut st, &start, &target, &w)).unwrap();
        let pose = model.pose_unchecked(&r.solution);
        let pe = (pose.position - target.position).norm();
        let re = pose.orientation.angle_to(&target.orientation);
        if pe <= 2e-3 && re <= 1f64.to_radians() && r.iterations <= st.max_iterations {
            solved += 1;
        }
    }
    let mut grad_err: f64 = 0.0;
    let h = 1e-6;
    for case in 0..100 {
        let target = model.pose_unchecked(&random_joints(&model, &mut rng, 0.85));
        let mut st = IkState::default();
        for _ in 0..case % 4 {
            st.push(&random_joints(&model, &mut rng, 0.85));
        }
        let j = random_joints(&model, &mut rng, 0.85);
        let include_torso = case % 2 == 0;
        let p = IkProblem {
            model: &model,
            target,
            weights: w,
            include_torso,
            fixed_torso: j.torso_pos,
        };
        let x: Vec<f64> = if include_torso { j.to_array().to_vec() } else { j.arm_q.to_vec() };
        let (_, g) = objective_gradient(&p, &x, &st).unwrap();
        let fd: Vec<f64> = (0..x.len())
            .map(|i| {
                let (mut a, mut b) = (x.clone(), x.clone());
                a[i] += h;
                b[i] -= h;
                (objective(&p, &a, &st).unwrap() - objective(&p, &b, &st).unwrap()) / (2.0 * h)
            })
            .collect();
        let scale = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
        for (a, b) in g.iter().zip(&fd) {
            grad_err = grad_err.max((a - b).abs() / scale);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let rate = solved as f64 / n as f64;
    rep.line(
        "ik",
        rate >= 0.95 && grad_err <= 1e-5 && secs < 60.0,
        format!("solved {solved}/{n} at 2 mm / 1 deg (>= 95%), gradient rel err {grad_err:.2e} (<= 1e-5), {secs:.1} s (< 60 s)"),
    );
}

fn statistics(rep: &mut Report) {
    let kw = kruskal_wallis(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]]).unwrap();
    let same = kruskal_wallis(&[vec![3.0; 4], vec![3.0; 4], vec![3.0; 4]]).unwrap();
    let dunn_ones = same.pairwise.iter().all(|p| p.p_adjusted == 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut rank_err: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..50);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        for (i, r) in midranks(&v).iter().enumerate() {
            let less = v.iter().filter(|y| **y < v[i]).count() as f64;
            let eq = v.iter().filter(|y| **y == v[i]).count() as f64;
            rank_err = rank_err.max((r - (1.0 + less + (eq - 1.0) / 2.0)).abs());
        }
    }
    rep.line(
        "statistics",
        (kw.h - 7.2).abs() < 1e-12 && same.h == 0.0 && dunn_ones && rank_err <= 1e-12,
        format!(
            "H {:.12} (7.2), identical groups H {} with all Dunn p_adj = 1: {dunn_ones}, midrank err {rank_err:.1e} (<= 1e-12)",
            kw.h, same.h
        ),
    );
}

fn determinism(rep: &mut Report) {
    let model = default_model();
    let mut bad = Vec::new();
    for mode in Mode::ALL {
        let cfg = SessionConfig::new(&model, mode, 42);
        let a = run_trial(&model, &cfg).unwrap();
        let b = run_trial(&model, &cfg).unwrap();
        let ra = replay_trace(&model, &cfg, &a.trace).unwrap();
        let rb = replay_trace(&model, &cfg, &a.trace).unwrap();
        let ok = a.log.to_jsonl_bytes() == b.log.to_jsonl_bytes()
            && ra.log.to_jsonl_bytes() == rb.log.to_jsonl_bytes()
            && ra.log.records == a.log.records;
        if !ok {
            bad.push(mode.to_string());
        }
    }
    rep.line(
        "determinism",
        bad.is_empty(),
        if bad.is_empty() {
            "byte-identical logs on repeat runs and replays for all 7 modes".into()
        } else {
            format!("differs in {}", bad.join(", "))
        },
    )
}

fn load(dir: &Path, mode: Mode, seed: u64) -> TrialLog {
    TrialLog::load(&dir.join(format!("trial_{mode}_{seed}.jsonl.gz"))).unwrap()
}

fn compensation(rep: &mut Report, dir: &Path, seeds: &[u64]) {
    let mut worst: f64 = 0.0;
    let mut moves = 0;
    for mode in [Mode::P, Mode::C, Mode::TB] {
        for &seed in seeds {
            let log = load(dir, mode, seed);
            for w in log.records.windows(2) {
                if w[1].compensation_applied != 0.0 {
                    moves += 1;
                    let change = w[1].commanded_world_z - w[0].commanded_world_z - w[1].hand_dz;
                    worst = worst.max(change.abs());
                }
            }
        }
    }
    rep.line(
        "compensation",
        moves > 0 && worst <= 1e-3,
        format!("{moves} compensated torso moves in P/C/TB, max commanded world z change {:.3e} mm (<= 1 mm)", worst * 1e3),
    );
}

fn groups(rows: &[TrialRow], modes: &[Mode], f: impl Fn(&TrialRow) -> f64) -> Vec<Vec<f64>> {
    modes
        .iter()
        .map(|m| rows.iter().filter(|r| r.mode == *m).map(&f).collect())
        .collect()
}

fn medians(rows: &[TrialRow], f: impl Fn(&TrialRow) -> f64 + Copy) -> Vec<(Mode, f64)> {
    Mode::ALL.iter().map(|m| (*m, median(&groups(rows, &[*m], f)[0]))).collect()
}

fn of(v: &[(Mode, f64)], m: Mode) -> f64 {
    v.iter().find(|(k, _)| *k == m).unwrap().1
}

fn fmt(v: &[(Mode, f64)], digits: usize) -> String {
    v.iter().map(|(m, x)| format!("{m}={x:.digits$}")).collect::<Vec<_>>().join(" ")
}

fn energy(rep: &mut Report, rows: &[TrialRow], secs: f64) {
    use Mode::*;
    let med = medians(rows, |r| r.metrics.torso_motion_time);
    let low = [V, PH, P, TB];
    let high = [S, C, RIK];
    let max_low = low.iter().map(|m| of(&med, *m)).fold(f64::MIN, f64::max);
    let min_high = high.iter().map(|m| of(&med, *m)).fold(f64::MAX, f64::min);
    let all = kruskal_wallis(&groups(rows, &Mode::ALL, |r| r.metrics.torso_motion_time)).unwrap();
    let pooled: Vec<Vec<f64>> = [&low[..], &high[..]]
        .iter()
        .map(|set| groups(rows, set, |r| r.metrics.torso_motion_time).concat())
        .collect();
    let two = kruskal_wallis(&pooled).unwrap();
    rep.line(
        "energy ordering",
        max_low < min_high && all.p < 0.05 && two.p < 0.05 && secs < 300.0,
        format!(
            "median torso_motion_time {} s; max(V,PH,P,TB) {max_low:.2} < min(S,C,RIK) {min_high:.2}; KW p {:.2e} (7 modes), {:.2e} (two sets); batch {secs:.0} s (< 300 s)",
            fmt(&med, 2),
            all.p,
            two.p
        ),
    );
}

fn long_range(rep: &mut Report, rows: &[TrialRow]) {
    use Mode::*;
    let med = medians(rows, |r| r.metrics.long_range_time);
    let s = of(&med, S);
    let c = of(&med, C);
    let ok = [V, PH, P, C].iter().all(|m| s < of(&med, *m)) && [V, RIK].iter().all(|m| c < of(&med, *m));
    rep.line(
        "long-range time ordering",
        ok,
        format!("median long_range_time {} s; need S < V,PH,P,C and C < V,RIK", fmt(&med, 2)),
    );
}

fn manipulability(rep: &mut Report, rows: &[TrialRow]) {
    use Mode::*;
    let mean: Vec<(Mode, f64)> = Mode::ALL
        .iter()
        .map(|m| {
            let v = &groups(rows, &[*m], |r| r.metrics.manipulability_mean)[0];
            (*m, v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    let rik = of(&mean, RIK);
    let c = of(&mean, C);
    let rik_best = Mode::ALL.iter().all(|m| rik >= of(&mean, *m));
    let c_p = c > of(&mean, P);
    let c_ph = c > of(&mean, PH);
    rep.line(
        "manipulability ordering",
        rik_best && c_p && c_ph,
        format!("mean trajectory manipulability {}; RIK best {rik_best}, C > P {c_p}, C > PH {c_ph}", fmt(&mean, 5)),
    );
}

fn task_integrity(rep: &mut Report, rows: &[TrialRow], dir: &Path, seeds: &[u64]) {
    let incomplete: Vec<String> = rows
        .iter()
        .filter(|r| !r.metrics.done || r.metrics.completed_subtasks != SUBTASK_COUNT || r.metrics.wrong_selections > 0 || r.error.is_some())
        .map(|r| format!("{}#{}", r.mode, r.seed))
        .collect();
    let mut prompted = 0;
    for mode in [Mode::V, Mode::PH] {
        for &seed in seeds {
            if load(dir, mode, seed).records.iter().any(|r| r.out_of_reach) {
                prompted += 1;
            }
        }
    }
    let ok = incomplete.is_empty() && prompted == 2 * seeds.len();
    rep.line(
        "task integrity",
        ok,
        format!(
            "{}/{} trials complete 12/12 with zero wrong selections{}; out-of-reach shown in {prompted}/{} V and PH trials",
            rows.len() - incomplete.len(),
            rows.len(),
            if incomplete.is_empty() { String::new() } else { format!(" (failed: {})", incomplete.join(" ")) },
            2 * seeds.len()
        ),
    );
}

fn main() {
    // Honour `cargo test -- --list` and filters that exclude this target.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if let Some(filter) = args.iter().find(|a| !a.starts_with('-')) {
        if !"acceptance".contains(filter.as_str()) {
            return;
        }
    }

    let mut rep = Report { failed: 0 };
    kinematics(&mut rep);
    ik(&mut rep);
    statistics(&mut rep);
    determinism(&mut rep);

    let model = default_model();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = SessionConfig::new(&model, Mode::V, 1);
    cfg.log_path = Some(dir.path().to_path_buf());
    let seeds: Vec<u64> = (0..10).map(|k| batch_seed(1, k)).collect();
    let t0 = Instant::now();
    let report = run_batch(&model, &cfg, &Mode::ALL, &seeds).unwrap();
    let secs = t0.elapsed().as_secs_f64();

    compensation(&mut rep, dir.path(), &seeds);
    energy(&mut rep, &report.rows, secs);
    long_range(&mut rep, &report.rows);
    manipulability(&mut rep, &report.rows);
    task_integrity(&mut rep, &report.rows, dir.path(), &seeds);

    // A saved trace from the batch replays to the saved log.
    let trace = InputTrace::load(&dir.path().join("trial_RIK_1.trace.jsonl")).unwrap();
    let replay = replay_trace(&model, &SessionConfig::new(&model, Mode::RIK, 1), &trace).unwrap();
    assert_eq!(replay.log.records, load(dir.path(), Mode::RIK, 1).records);

    println!("acceptance: {} of 9 criteria failed", rep.failed);
    if rep.failed > 0 {
        std::process::exit(1);
    }
}
