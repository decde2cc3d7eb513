//! Kinematic model of a prismatic torso lift carrying a 7-DoF serial arm.
//!
//! The torso is a pure vertical translation of the arm mount. The arm is
//! described URDF-style: each joint has a fixed origin transform relative to
//! the previous joint frame followed by a rotation about its axis. All chain
//! math is generic over [`Real`] so the IK objective can be differentiated
//! with dual numbers through the exact same code that produces poses.

use nalgebra::{Matrix3, Rotation3, SMatrix, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{det, Real, M3, V3};

pub const ARM_DOF: usize = 7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("joint {joint} value {value} outside [{lo}, {hi}]")]
    LimitViolation {
        joint: String,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("non-finite joint value in {0}")]
    NonFinite(String),
    #[error("invalid robot model: {0}")]
    InvalidModel(String),
}

/// One revolute arm joint as written in the model file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct JointSpec {
    pub name: String,
    pub origin_xyz: [f64; 3],
    pub origin_rpy: [f64; 3],
    pub axis: [f64; 3],
    /// Position limits, rad.
    pub limits: [f64; 2],
    /// rad/s
    pub velocity_limit: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FixedSpec {
    pub origin_xyz: [f64; 3],
    pub origin_rpy: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TorsoSpec {
    /// Travel range of the prismatic lift, m.
    pub travel: [f64; 2],
    /// m/s
    pub velocity_limit: f64,
    pub preset_heights: Vec<f64>,
}

/// Conservative reach annulus around the shoulder.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReachSpec {
    /// Shoulder point in the torso frame.
    pub shoulder: [f64; 3],
    pub min_radius: f64,
    pub max_radius: f64,
    /// Vertical extent of the arm target in the torso frame that coordination
    /// may command; compensation never pushes the arm target outside it.
    pub arm_z_range: [f64; 2],
}

/// Vertical lift column used by the self-collision proxy.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ColumnSpec {
    /// Column axis position in the horizontal plane, world frame.
    pub xy: [f64; 2],
    /// Minimum allowed distance between the wrist segment and the column axis.
    pub clearance: f64,
}

/// Serializable description of the robot (the `[robot]` table of a model file).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RobotSpec {
    pub name: String,
    /// Height of the arm mount above the floor with the torso at 0, m.
    pub base_height: f64,
    /// Center of the arm's comfortable vertical envelope in the torso frame, m.
    pub nominal_arm_center_z: f64,
    /// Maximum Cartesian end-effector speed, m/s.
    pub max_ee_speed: f64,
    pub torso: TorsoSpec,
    pub joints: Vec<JointSpec>,
    pub tool: FixedSpec,
    pub reach: ReachSpec,
    pub column: ColumnSpec,
}

#[derive(Debug, Clone, Copy)]
struct Fixed {
    rot: [[f64; 3]; 3],
    trans: [f64; 3],
}

impl Fixed {
    fn from_xyz_rpy(xyz: [f64; 3], rpy: [f64; 3]) -> Self {
        let r = Rotation3::from_euler_angles(rpy[0], rpy[1], rpy[2]);
        let m = r.matrix();
        let mut rot = [[0.0; 3]; 3];
        for (i, row) in rot.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = m[(i, j)];
            }
        }
        Fixed { rot, trans: xyz }
    }
}

/// Validated robot model with cached fixed transforms.
#[derive(Debug, Clone)]
pub struct RobotModel {
    spec: RobotSpec,
    fixed: Vec<Fixed>,
    tool: Fixed,
}

/// Configuration of the torso + arm chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointVector {
    /// m
    pub torso_pos: f64,
    /// rad
    pub arm_q: [f64; ARM_DOF],
}

impl JointVector {
    pub fn new(torso_pos: f64, arm_q: [f64; ARM_DOF]) -> Self {
        JointVector { torso_pos, arm_q }
    }

    /// Torso first, then the seven arm angles.
    pub fn to_array(&self) -> [f64; ARM_DOF + 1] {
        let mut out = [0.0; ARM_DOF + 1];
        out[0] = self.torso_pos;
        out[1..].copy_from_slice(&self.arm_q);
        out
    }

    pub fn from_array(a: &[f64; ARM_DOF + 1]) -> Self {
        let mut arm_q = [0.0; ARM_DOF];
        arm_q.copy_from_slice(&a[1..]);
        JointVector {
            torso_pos: a[0],
            arm_q,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.torso_pos.is_finite() && self.arm_q.iter().all(|q| q.is_finite())
    }
}

/// World-frame end-effector pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Pose {
            position,
            orientation,
        }
    }

    pub fn from_matrix(position: [f64; 3], rot: [[f64; 3]; 3]) -> Self {
        let m = Matrix3::from_fn(|i, j| rot[i][j]);
        let r = Rotation3::from_matrix_unchecked(m);
        Pose {
            position: Vector3::from(position),
            orientation: UnitQuaternion::from_rotation_matrix(&r),
        }
    }

    pub fn rotation_array(&self) -> [[f64; 3]; 3] {
        let m = self.orientation.to_rotation_matrix();
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = m[(i, j)];
            }
        }
        out
    }

    pub fn translated(&self, delta: Vector3<f64>) -> Self {
        Pose {
            position: self.position + delta,
            orientation: self.orientation,
        }
    }

    pub fn with_z(&self, z: f64) -> Self {
        let mut p = *self;
        p.position.z = z;
        p
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.orientation.coords.iter().all(|v| v.is_finite())
    }
}

/// Geometric Jacobian of the end effector with respect to the arm joints.
/// Rows 0..3 are linear (m/rad), rows 3..6 angular (1/rad).
pub type JacobianMatrix = SMatrix<f64, 6, ARM_DOF>;

/// Per-joint frames of one chain evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ChainFrames<T> {
    /// World-frame joint axes.
    pub axes: [V3<T>; ARM_DOF],
    /// World-frame joint origins.
    pub origins: [V3<T>; ARM_DOF],
    pub ee_rot: M3<T>,
    pub ee_pos: V3<T>,
}

impl<T: Real> ChainFrames<T> {
    pub fn jacobian(&self) -> [[T; ARM_DOF]; 6] {
        let mut j = [[T::cst(0.0); ARM_DOF]; 6];
        for i in 0..ARM_DOF {
            let lin = self.axes[i].cross(&self.ee_pos.sub(&self.origins[i]));
            for r in 0..3 {
                j[r][i] = lin.0[r];
                j[r + 3][i] = self.axes[i].0[r];
            }
        }
        j
    }
}

/// Yoshikawa measure `sqrt(det(J Jᵀ))` of a generic `R×7` Jacobian block.
pub fn manipulability_generic<T: Real, const R: usize>(j: &[[T; ARM_DOF]; R]) -> T {
    let mut jjt = [[T::cst(0.0); R]; R];
    for a in 0..R {
        for b in a..R {
            let mut s = T::cst(0.0);
            for k in 0..ARM_DOF {
                s += j[a][k] * j[b][k];
            }
            jjt[a][b] = s;
            jjt[b][a] = s;
        }
    }
    det(jjt).max0().safe_sqrt()
}

impl RobotModel {
    pub fn from_spec(spec: RobotSpec) -> Result<Self, KinematicsError> {
        let bad = |m: String| Err(KinematicsError::InvalidModel(m));
        if spec.joints.len() != ARM_DOF {
            return bad(format!(
                "expected {ARM_DOF} revolute arm joints, found {}",
                spec.joints.len()
            ));
        }
        for j in &spec.joints {
            if !(j.limits[0] < j.limits[1]) {
                return bad(format!("joint {} has an empty limit interval", j.name));
            }
            if !(j.velocity_limit > 0.0) {
                return bad(format!("joint {} velocity limit must be > 0", j.name));
            }
            let n = j.axis.iter().map(|a| a * a).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return bad(format!("joint {} axis is not a unit vector", j.name));
            }
        }
        let t = &spec.torso;
        if !(t.travel[0] < t.travel[1]) {
            return bad("torso travel interval is empty".into());
        }
        if !(t.velocity_limit > 0.0) {
            return bad("torso velocity limit must be > 0".into());
        }
        if !(spec.max_ee_speed > 0.0) {
            return bad("max_ee_speed must be > 0".into());
        }
        if t.velocity_limit >= spec.max_ee_speed {
            return bad("torso must be slower than the arm end effector".into());
        }
        if !(0.0 <= spec.reach.min_radius && spec.reach.min_radius < spec.reach.max_radius) {
            return bad("reach annulus is empty".into());
        }
        if !(spec.reach.arm_z_range[0] < spec.reach.arm_z_range[1]) {
            return bad("arm_z_range is empty".into());
        }
        let fixed = spec
            .joints
            .iter()
            .map(|j| Fixed::from_xyz_rpy(j.origin_xyz, j.origin_rpy))
            .collect();
        let tool = Fixed::from_xyz_rpy(spec.tool.origin_xyz, spec.tool.origin_rpy);
        Ok(RobotModel { spec, fixed, tool })
    }

    pub fn spec(&self) -> &RobotSpec {
        &self.spec
    }

    pub fn joint(&self, i: usize) -> &JointSpec {
        &self.spec.joints[i]
    }

    pub fn torso_range(&self) -> (f64, f64) {
        (self.spec.torso.travel[0], self.spec.torso.travel[1])
    }

    pub fn torso_velocity_limit(&self) -> f64 {
        self.spec.torso.velocity_limit
    }

    pub fn base_height(&self) -> f64 {
        self.spec.base_height
    }

    /// World z of the torso frame origin (arm mount).
    pub fn mount_z(&self, torso_pos: f64) -> f64 {
        self.spec.base_height + torso_pos
    }

    pub fn nominal_arm_center_z(&self) -> f64 {
        self.spec.nominal_arm_center_z
    }

    pub fn clamp_torso(&self, z: f64) -> f64 {
        let (lo, hi) = self.torso_range();
        z.clamp(lo, hi)
    }

    /// Lower and upper bound of every variable, torso first.
    pub fn bounds(&self) -> [(f64, f64); ARM_DOF + 1] {
        let mut b = [(0.0, 0.0); ARM_DOF + 1];
        b[0] = self.torso_range();
        for i in 0..ARM_DOF {
            let l = self.spec.joints[i].limits;
            b[i + 1] = (l[0], l[1]);
        }
        b
    }

    pub fn clamp(&self, j: &JointVector) -> JointVector {
        let b = self.bounds();
        let mut a = j.to_array();
        for (v, (lo, hi)) in a.iter_mut().zip(b.iter()) {
            *v = v.clamp(*lo, *hi);
        }
        JointVector::from_array(&a)
    }

    pub fn check_limits(&self, j: &JointVector) -> Result<(), KinematicsError> {
        if !j.is_finite() {
            return Err(KinematicsError::NonFinite(format!("{j:?}")));
        }
        let (lo, hi) = self.torso_range();
        if j.torso_pos < lo || j.torso_pos > hi {
            return Err(KinematicsError::LimitViolation {
                joint: "torso".into(),
                value: j.torso_pos,
                lo,
                hi,
            });
        }
        for (i, q) in j.arm_q.iter().enumerate() {
            let js = &self.spec.joints[i];
            if *q < js.limits[0] || *q > js.limits[1] {
                return Err(KinematicsError::LimitViolation {
                    joint: js.name.clone(),
                    value: *q,
                    lo: js.limits[0],
                    hi: js.limits[1],
                });
            }
        }
        Ok(())
    }

    /// Chain evaluation without limit checks, generic over the scalar type.
    pub fn chain<T: Real>(&self, torso: T, q: &[T; ARM_DOF]) -> ChainFrames<T> {
        let mut rot = M3::<T>::identity();
        let mut pos = V3::new(T::cst(0.0), T::cst(0.0), torso + self.spec.base_height);
        let mut axes = [V3::<T>::zero(); ARM_DOF];
        let mut origins = [V3::<T>::zero(); ARM_DOF];
        for i in 0..ARM_DOF {
            let f = &self.fixed[i];
            pos = pos.add(&rot.mul_vec(&V3::cst(f.trans)));
            rot = rot.mul(&M3::cst(f.rot));
            let axis = self.spec.joints[i].axis;
            axes[i] = rot.mul_vec(&V3::cst(axis));
            origins[i] = pos;
            rot = rot.mul(&M3::axis_angle(axis, q[i]));
        }
        let ee_pos = pos.add(&rot.mul_vec(&V3::cst(self.tool.trans)));
        let ee_rot = rot.mul(&M3::cst(self.tool.rot));
        ChainFrames {
            axes,
            origins,
            ee_rot,
            ee_pos,
        }
    }

    /// Pose without limit checks.
    pub fn pose_unchecked(&self, j: &JointVector) -> Pose {
        let c = self.chain(j.torso_pos, &j.arm_q);
        Pose::from_matrix(c.ee_pos.re(), c.ee_rot.re())
    }

    pub fn jacobian_unchecked(&self, j: &JointVector) -> JacobianMatrix {
        let c = self.chain(j.torso_pos, &j.arm_q);
        let jac = c.jacobian();
        JacobianMatrix::from_fn(|r, k| jac[r][k])
    }

    /// Shoulder point in world coordinates at the given torso height.
    pub fn shoulder_world(&self, torso_pos: f64) -> Vector3<f64> {
        let s = self.spec.reach.shoulder;
        Vector3::new(s[0], s[1], s[2] + self.mount_z(torso_pos))
    }

    /// Wrist segment endpoints (wrist joint origin and tool point).
    pub fn wrist_segment<T: Real>(c: &ChainFrames<T>) -> (V3<T>, V3<T>) {
        (c.origins[5], c.ee_pos)
    }
}

pub fn forward_kinematics(model: &RobotModel, joints: &JointVector) -> Result<Pose, KinematicsError> {
    model.check_limits(joints)?;
    Ok(model.pose_unchecked(joints))
}

pub fn arm_jacobian(
    model: &RobotModel,
    joints: &JointVector,
) -> Result<JacobianMatrix, KinematicsError> {
    model.check_limits(joints)?;
    Ok(model.jacobian_unchecked(joints))
}

/// Yoshikawa manipulability of the full 6×7 arm Jacobian. Singular → 0.
pub fn manipulability_index(j: &JacobianMatrix) -> f64 {
    let rows: [[f64; ARM_DOF]; 6] = std::array::from_fn(|r| std::array::from_fn(|k| j[(r, k)]));
    manipulability_generic(&rows)
}

/// Position-only (3×7) variant of the manipulability index.
pub fn position_manipulability_index(j: &JacobianMatrix) -> f64 {
    let rows: [[f64; ARM_DOF]; 3] = std::array::from_fn(|r| std::array::from_fn(|k| j[(r, k)]));
    manipulability_generic(&rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reachability {
    Reachable,
    OutOfReach,
}

/// Annulus test of the target position around the shoulder at the current
/// torso height, intersected with the commandable arm height band. Orientation
/// is not considered.
pub fn check_reachable(model: &RobotModel, joints: &JointVector, target: &Pose) -> Reachability {
    let d = (target.position - model.shoulder_world(joints.torso_pos)).norm();
    let r = &model.spec.reach;
    let local_z = target.position.z - model.mount_z(joints.torso_pos);
    let in_band = local_z >= r.arm_z_range[0] && local_z <= r.arm_z_range[1];
    if d >= r.min_radius && d <= r.max_radius && in_band {
        Reachability::Reachable
    } else {
        Reachability::OutOfReach
    }
}

/// Tool orientation used for shelf grasps: approach axis along world +x,
/// tool x axis pointing down.
pub fn grasp_orientation() -> UnitQuaternion<f64> {
    let m = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m))
}
