//! Weighted multi-objective inverse kinematics.
//!
//! Every objective term is a scalar residual passed through the groove
//! kernel `g(x) = -exp(-x²/(2c²)) + k·x⁴`, then weighted and summed. The
//! gradient comes from forward-mode dual numbers over the same chain code
//! used for forward kinematics, and the minimizer is a box-projected BFGS
//! warm-started at the current configuration.
//!
//! Two variants share the minimizer: arm-only (torso held fixed) and
//! integrated torso + arm.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Dual, Real, M3, V3};
use crate::kinematics::{manipulability_generic, JointVector, Pose, RobotModel, ARM_DOF};

pub const NDOF: usize = ARM_DOF + 1;

/// Groove kernel width.
pub const GROOVE_C: f64 = 0.2;
/// Groove kernel quartic coefficient.
pub const GROOVE_K: f64 = 0.1;

/// Residual normalization: the pose errors are expressed in these units
/// before entering the kernel, so that millimetre errors are not lost in the
/// kernel's flat bottom.
pub const POS_SCALE: f64 = 0.1;
pub const ROT_SCALE: f64 = 0.3;

/// Soft limit band: the penalty starts at this fraction of the half range.
const LIMIT_BAND_START: f64 = 0.9;

#[derive(Debug, Error, Clone)]
pub enum IkError {
    #[error("candidate has {found} variables, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid IK input: {0}")]
    InvalidInput(String),
    #[error("IK did not converge after {} iterations", best.iterations)]
    NotConverged { best: IkResult },
}

impl IkError {
    /// Best available iterate, if the error carries one.
    pub fn best(&self) -> Option<&IkResult> {
        match self {
            IkError::NotConverged { best } => Some(best),
            _ => None,
        }
    }
}

/// Objective weights. One documented default set; no per-task tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IkWeights {
    pub w_pos: f64,
    pub w_rot: f64,
    pub w_vel: f64,
    pub w_acc: f64,
    pub w_jerk: f64,
    pub w_selfcol: f64,
    pub w_limits: f64,
    /// Weight of the manipulability floor term.
    pub w_manip: f64,
    /// Manipulability below which the floor term becomes active.
    pub manip_floor: f64,
}

impl Default for IkWeights {
    fn default() -> Self {
        IkWeights {
            w_pos: 20.0,
            w_rot: 10.0,
            w_vel: 3.0,
            w_acc: 1.0,
            w_jerk: 0.5,
            w_selfcol: 5.0,
            w_limits: 5.0,
            w_manip: 3.0,
            manip_floor: 0.1,
        }
    }
}

impl IkWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [
            self.w_pos,
            self.w_rot,
            self.w_vel,
            self.w_acc,
            self.w_jerk,
            self.w_selfcol,
            self.w_limits,
            self.w_manip,
            self.manip_floor,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err("IK weights must be finite and non-negative".into());
        }
        if self.w_pos <= 0.0 && self.w_rot <= 0.0 {
            return Err("at least one of w_pos, w_rot must be positive".into());
        }
        Ok(())
    }
}

/// Solver memory and budget. Owned by one simulation session.
#[derive(Debug, Clone, PartialEq)]
pub struct IkState {
    /// Accepted solutions, most recent first (torso first, then arm).
    history: Vec<[f64; NDOF]>,
    pub max_iterations: usize,
    /// Position tolerance for the `converged` flag, m.
    pub pos_tol: f64,
    /// Orientation tolerance for the `converged` flag, rad.
    pub rot_tol: f64,
    /// Inverse Hessian estimate carried between solves of the same variant.
    hessian: Option<(bool, Hessian)>,
}

type Hessian = [[f64; NDOF]; NDOF];

impl Default for IkState {
    fn default() -> Self {
        IkState {
            history: Vec::new(),
            max_iterations: 100,
            pos_tol: 1e-3,
            rot_tol: 0.5f64.to_radians(),
            hessian: None,
        }
    }
}

impl IkState {
    pub fn with_history(solutions: &[JointVector]) -> Self {
        let mut s = IkState::default();
        for j in solutions.iter().rev() {
            s.push(j);
        }
        s
    }

    pub fn history(&self) -> &[[f64; NDOF]] {
        &self.history
    }

    pub fn push(&mut self, j: &JointVector) {
        self.history.insert(0, j.to_array());
        self.history.truncate(3);
    }

    pub fn clear(&mut self) {
        self.history.clear();
        self.hessian = None;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IkResult {
    pub solution: JointVector,
    pub objective_value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub position_error: f64,
    pub rotation_error: f64,
}

/// One IK query: a world-frame target for the tool, plus which variables move.
#[derive(Debug, Clone, Copy)]
pub struct IkProblem<'a> {
    pub model: &'a RobotModel,
    pub target: Pose,
    pub weights: IkWeights,
    /// Optimize the torso as well as the arm.
    pub include_torso: bool,
    /// Torso height used when the torso is not optimized.
    pub fixed_torso: f64,
}

pub fn groove<T: Real>(x: T) -> T {
    let e = -(x * x) / (2.0 * GROOVE_C * GROOVE_C);
    -e.exp() + x.powi(4) * GROOVE_K
}

/// Per-term residuals of a candidate, exposed for diagnostics and tests.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Residuals {
    pub position: f64,
    pub rotation: f64,
    pub velocity: Option<f64>,
    pub acceleration: Option<f64>,
    pub jerk: Option<f64>,
    pub self_collision: f64,
    pub limits: f64,
    pub manipulability: f64,
}

/// Closest distance between segments `p0-p1` and `q0-q1`.
pub fn segment_distance<T: Real>(p0: &V3<T>, p1: &V3<T>, q0: &V3<T>, q1: &V3<T>) -> T {
    let d1 = p1.sub(p0);
    let d2 = q1.sub(q0);
    let r = p0.sub(q0);
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    let eps = 1e-12;
    let (s, t);
    if a.re() <= eps && e.re() <= eps {
        return r.norm();
    }
    if a.re() <= eps {
        s = T::cst(0.0);
        t = (f / e).clamp01();
    } else {
        let c = d1.dot(&r);
        if e.re() <= eps {
            t = T::cst(0.0);
            s = (-c / a).clamp01();
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s0 = if denom.re() > eps {
                ((b * f - c * e) / denom).clamp01()
            } else {
                T::cst(0.0)
            };
            let mut t0 = (b * s0 + f) / e;
            if t0.re() < 0.0 {
                t0 = T::cst(0.0);
                s0 = (-c / a).clamp01();
            } else if t0.re() > 1.0 {
                t0 = T::cst(1.0);
                s0 = ((b - c) / a).clamp01();
            }
            s = s0;
            t = t0;
        }
    }
    let c1 = p0.add(&d1.scale(s));
    let c2 = q0.add(&d2.scale(t));
    c1.sub(&c2).norm()
}

impl<'a> IkProblem<'a> {
    pub fn dof(&self) -> usize {
        if self.include_torso {
            NDOF
        } else {
            ARM_DOF
        }
    }

    fn active(&self) -> [bool; NDOF] {
        let mut a = [true; NDOF];
        a[0] = self.include_torso;
        a
    }

    /// Full-length variable vector from a candidate of length `dof()`.
    fn expand(&self, q: &[f64]) -> Result<[f64; NDOF], IkError> {
        if q.len() != self.dof() {
            return Err(IkError::DimensionMismatch {
                expected: self.dof(),
                found: q.len(),
            });
        }
        let mut x = [0.0; NDOF];
        if self.include_torso {
            x.copy_from_slice(q);
        } else {
            x[0] = self.fixed_torso;
            x[1..].copy_from_slice(q);
        }
        Ok(x)
    }

    fn residuals_generic<T: Real>(&self, x: &[T; NDOF], history: &[[f64; NDOF]]) -> [Option<T>; 8] {
        let active = self.active();
        let q: [T; ARM_DOF] = std::array::from_fn(|i| x[i + 1]);
        let chain = self.model.chain(x[0], &q);

        let tp = self.target.position;
        let pos = chain.ee_pos.sub(&V3::cst([tp.x, tp.y, tp.z])).norm() / POS_SCALE;

        let rt = M3::<T>::cst(self.target.rotation_array());
        let rot = rt.transpose().mul(&chain.ee_rot).angle() / ROT_SCALE;

        let diff = |coef: &[f64]| -> Option<T> {
            if history.len() + 1 < coef.len() {
                return None;
            }
            let mut acc = T::cst(0.0);
            for k in 0..NDOF {
                if !active[k] {
                    continue;
                }
                let mut v = x[k] * coef[0];
                for (h, c) in history.iter().zip(&coef[1..]) {
                    v += T::cst(h[k] * c);
                }
                acc += v * v;
            }
            Some(acc.safe_sqrt())
        };
        let vel = diff(&[1.0, -1.0]);
        let acc = diff(&[1.0, -2.0, 1.0]);
        let jerk = diff(&[1.0, -3.0, 3.0, -1.0]);

        let col = &self.model.spec().column;
        let (w0, w1) = RobotModel::wrist_segment(&chain);
        let c0 = V3::new(T::cst(col.xy[0]), T::cst(col.xy[1]), T::cst(0.0));
        let c1 = V3::new(
            T::cst(col.xy[0]),
            T::cst(col.xy[1]),
            x[0] + self.model.base_height(),
        );
        let dist = segment_distance(&w0, &w1, &c0, &c1);
        let selfcol = (T::cst(col.clearance) - dist).max0() / col.clearance;

        let mut lim = T::cst(0.0);
        for i in 0..ARM_DOF {
            let l = self.model.joint(i).limits;
            let mid = 0.5 * (l[0] + l[1]);
            let half = 0.5 * (l[1] - l[0]);
            let u = (q[i] - mid).abs() / half;
            let over = (u - LIMIT_BAND_START).max0() / (1.0 - LIMIT_BAND_START);
            lim += over * over;
        }
        let lim = lim.safe_sqrt();

        let manip = if self.weights.w_manip > 0.0 && self.weights.manip_floor > 0.0 {
            let m = manipulability_generic(&chain.jacobian());
            (T::cst(1.0) - m / self.weights.manip_floor).max0()
        } else {
            T::cst(0.0)
        };

        [
            Some(pos),
            Some(rot),
            vel,
            acc,
            jerk,
            Some(selfcol),
            Some(lim),
            Some(manip),
        ]
    }

    fn weight_vector(&self) -> [f64; 8] {
        let w = &self.weights;
        [
            w.w_pos,
            w.w_rot,
            w.w_vel,
            w.w_acc,
            w.w_jerk,
            w.w_selfcol,
            w.w_limits,
            w.w_manip,
        ]
    }

    fn value_generic<T: Real>(&self, x: &[T; NDOF], history: &[[f64; NDOF]]) -> T {
        let res = self.residuals_generic(x, history);
        let mut f = T::cst(0.0);
        for (r, w) in res.iter().zip(self.weight_vector()) {
            if let Some(r) = r {
                if w > 0.0 {
                    f += groove(*r) * w;
                }
            }
        }
        f
    }

    /// Minimum the objective can take with every active term at zero residual.
    pub fn kernel_floor(&self, history_len: usize) -> f64 {
        let w = self.weight_vector();
        let g0 = groove(0.0);
        let mut f = 0.0;
        for (i, wi) in w.iter().enumerate() {
            let present = match i {
                2 => history_len >= 1,
                3 => history_len >= 2,
                4 => history_len >= 3,
                _ => true,
            };
            if present && *wi > 0.0 {
                f += wi * g0;
            }
        }
        f
    }

    pub fn residuals(&self, q: &[f64], state: &IkState) -> Result<Residuals, IkError> {
        let x = self.expand(q)?;
        let r = self.residuals_generic(&x, state.history());
        Ok(Residuals {
            position: r[0].unwrap() * POS_SCALE,
            rotation: r[1].unwrap() * ROT_SCALE,
            velocity: r[2],
            acceleration: r[3],
            jerk: r[4],
            self_collision: r[5].unwrap(),
            limits: r[6].unwrap(),
            manipulability: r[7].unwrap(),
        })
    }

    fn eval_full(&self, x: &[f64; NDOF], history: &[[f64; NDOF]]) -> f64 {
        self.value_generic(x, history)
    }

    fn grad_full(&self, x: &[f64; NDOF], history: &[[f64; NDOF]]) -> (f64, [f64; NDOF]) {
        let active = self.active();
        let xd: [Dual<NDOF>; NDOF] = std::array::from_fn(|i| {
            if active[i] {
                Dual::variable(x[i], i)
            } else {
                Dual::constant(x[i])
            }
        });
        let f = self.value_generic(&xd, history);
        (f.v, f.d)
    }
}

/// Objective value of a candidate (7 values arm-only, 8 with torso first).
pub fn objective(problem: &IkProblem, q_candidate: &[f64], state: &IkState) -> Result<f64, IkError> {
    let x = problem.expand(q_candidate)?;
    Ok(problem.eval_full(&x, state.history()))
}

/// Objective value and autodiff gradient over the candidate's variables.
pub fn objective_gradient(
    problem: &IkProblem,
    q_candidate: &[f64],
    state: &IkState,
) -> Result<(f64, Vec<f64>), IkError> {
    let x = problem.expand(q_candidate)?;
    let (f, g) = problem.grad_full(&x, state.history());
    let g = if problem.include_torso {
        g.to_vec()
    } else {
        g[1..].to_vec()
    };
    Ok((f, g))
}

struct MinimizeOutcome {
    x: [f64; NDOF],
    f: f64,
    iterations: usize,
    hessian: Option<Hessian>,
}

fn project(x: &mut [f64; NDOF], bounds: &[(f64, f64); NDOF]) {
    for (v, (lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(*lo, *hi);
    }
}

/// Box-projected BFGS with Armijo backtracking. Accepted iterates never
/// increase the objective.
fn minimize(
    problem: &IkProblem,
    x0: [f64; NDOF],
    history: &[[f64; NDOF]],
    max_iter: usize,
    h0: Option<Hessian>,
) -> MinimizeOutcome {
    const MAX_STEP: f64 = 0.4;
    const GTOL: f64 = 1e-8;
    const FTOL: f64 = 1e-12;
    const XTOL: f64 = 1e-10;

    let active = problem.active();
    let bounds = problem.model.bounds();
    let mut x = x0;
    project(&mut x, &bounds);
    let (mut f, mut g) = problem.grad_full(&x, history);
    let mut have_h = h0.is_some();
    let mut h = h0.unwrap_or([[0.0; NDOF]; NDOF]);
    let mut iterations = 0;

    while iterations < max_iter {
        // Free variables: active, and not pinned at a bound by the gradient.
        let mut free = [false; NDOF];
        let mut gnorm: f64 = 0.0;
        for i in 0..NDOF {
            let (lo, hi) = bounds[i];
            let pinned = (x[i] <= lo && g[i] > 0.0) || (x[i] >= hi && g[i] < 0.0);
            free[i] = active[i] && !pinned;
            if free[i] {
                gnorm = gnorm.max(g[i].abs());
            }
        }
        if gnorm < GTOL {
            break;
        }

        let mut d = [0.0; NDOF];
        if have_h {
            for i in 0..NDOF {
                if !free[i] {
                    continue;
                }
                let mut s = 0.0;
                for j in 0..NDOF {
                    if free[j] {
                        s += h[i][j] * g[j];
                    }
                }
                d[i] = -s;
            }
        } else {
            let scale = 0.05 / gnorm;
            for i in 0..NDOF {
                if free[i] {
                    d[i] = -g[i] * scale;
                }
            }
        }
        let mut slope: f64 = (0..NDOF).map(|i| d[i] * g[i]).sum();
        if slope >= 0.0 {
            // Lost descent: fall back to steepest descent.
            have_h = false;
            let scale = 0.05 / gnorm;
            for i in 0..NDOF {
                d[i] = if free[i] { -g[i] * scale } else { 0.0 };
            }
            slope = (0..NDOF).map(|i| d[i] * g[i]).sum();
        }
        let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if dmax > MAX_STEP {
            for v in d.iter_mut() {
                *v *= MAX_STEP / dmax;
            }
        }
        let _ = slope;

        iterations += 1;
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut xn = x;
            for i in 0..NDOF {
                xn[i] += alpha * d[i];
            }
            project(&mut xn, &bounds);
            let dec: f64 = (0..NDOF).map(|i| g[i] * (xn[i] - x[i])).sum();
            let fnew = problem.eval_full(&xn, history);
            if fnew <= f + 1e-4 * dec && fnew <= f {
                accepted = Some((xn, fnew));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            if have_h {
                have_h = false;
                continue;
            }
            break;
        };
        let (_, gn) = problem.grad_full(&xn, history);
        let s: [f64; NDOF] = std::array::from_fn(|i| xn[i] - x[i]);
        let y: [f64; NDOF] = std::array::from_fn(|i| gn[i] - g[i]);
        let sy: f64 = (0..NDOF).map(|i| s[i] * y[i]).sum();
        let smax = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let fprev = f;
        x = xn;
        f = fnew;
        g = gn;

        if sy > 1e-16 {
            if !have_h {
                let yy: f64 = y.iter().map(|v| v * v).sum();
                let gamma = sy / yy;
                h = [[0.0; NDOF]; NDOF];
                for (i, row) in h.iter_mut().enumerate() {
                    row[i] = gamma;
                }
                have_h = true;
            }
            // H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ
            let rho = 1.0 / sy;
            let hy: [f64; NDOF] = std::array::from_fn(|i| (0..NDOF).map(|j| h[i][j] * y[j]).sum());
            let yhy: f64 = (0..NDOF).map(|i| y[i] * hy[i]).sum();
            for i in 0..NDOF {
                for j in 0..NDOF {
                    h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }

        if (fprev - f).abs() <= FTOL * (1.0 + f.abs()) || smax < XTOL {
            break;
        }
    }
    MinimizeOutcome {
        x,
        f,
        iterations,
        hessian: have_h.then_some(h),
    }
}

fn validate_inputs(model: &RobotModel, current: &JointVector, target: &Pose) -> Result<(), IkError> {
    if !target.is_finite() {
        return Err(IkError::InvalidInput("target pose is not finite".into()));
    }
    model
        .check_limits(current)
        .map_err(|e| IkError::InvalidInput(e.to_string()))
}

fn solve(problem: &IkProblem, state: &mut IkState, current: &JointVector) -> Result<IkResult, IkError> {
    validate_inputs(problem.model, current, &problem.target)?;
    let mut x0 = current.to_array();
    if !problem.include_torso {
        x0[0] = problem.fixed_torso;
    }
    let h0 = match state.hessian {
        Some((torso, h)) if torso == problem.include_torso => Some(h),
        _ => None,
    };
    let out = minimize(problem, x0, state.history(), state.max_iterations, h0);
    state.hessian = out.hessian.map(|h| (problem.include_torso, h));
    let solution = problem.model.clamp(&JointVector::from_array(&out.x));
    let res = problem.residuals_generic(&out.x, state.history());
    let (pe, re) = (res[0].unwrap() * POS_SCALE, res[1].unwrap() * ROT_SCALE);
    let result = IkResult {
        solution,
        objective_value: out.f,
        converged: pe <= state.pos_tol && re <= state.rot_tol,
        iterations: out.iterations,
        position_error: pe,
        rotation_error: re,
    };
    // The best iterate is what the caller executes either way, so it always
    // enters the smoothness history.
    state.push(&solution);
    if result.converged {
        Ok(result)
    } else {
        Err(IkError::NotConverged { best: result })
    }
}

/// Arm-only IK: the torso stays at `current.torso_pos`.
pub fn solve_arm_ik(
    model: &RobotModel,
    state: &mut IkState,
    current: &JointVector,
    target: &Pose,
    weights: &IkWeights,
) -> Result<IkResult, IkError> {
    let problem = IkProblem {
        model,
        target: *target,
        weights: *weights,
        include_torso: false,
        fixed_torso: current.torso_pos,
    };
    solve(&problem, state, current)
}

/// Integrated torso + arm IK over all eight variables.
pub fn solve_integrated_ik(
    model: &RobotModel,
    state: &mut IkState,
    current: &JointVector,
    target: &Pose,
    weights: &IkWeights,
) -> Result<IkResult, IkError> {
    let problem = IkProblem {
        model,
        target: *target,
        weights: *weights,
        include_torso: true,
        fixed_torso: current.torso_pos,
    };
    solve(&problem, state, current)
}

/// Integrated solve with the torso locked in place; reduces to the arm-only
/// problem.
pub fn solve_integrated_ik_torso_locked(
    model: &RobotModel,
    state: &mut IkState,
    current: &JointVector,
    target: &Pose,
    weights: &IkWeights,
) -> Result<IkResult, IkError> {
    let problem = IkProblem {
        model,
        target: *target,
        weights: *weights,
        include_torso: false,
        fixed_torso: current.torso_pos,
    };
    solve(&problem, state, current)
}

/// Result of a solve regardless of convergence.
pub fn best_effort(r: Result<IkResult, IkError>) -> Result<IkResult, IkError> {
    match r {
        Ok(r) => Ok(r),
        Err(IkError::NotConverged { best }) => Ok(best),
        Err(e) => Err(e),
    }
}
