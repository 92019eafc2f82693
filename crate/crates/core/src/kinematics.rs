//! Serial-chain model of the 8-DoF needle robot.
//!
//! Joint layout, base to tip:
//!
//! | joint | kind      | motion                                 |
//! |-------|-----------|----------------------------------------|
//! | q1    | prismatic | back-end X stage                       |
//! | q2    | prismatic | back-end Y stage                       |
//! | q3    | prismatic | back-end Z stage                       |
//! | q4    | revolute  | trunnion roll about Z                  |
//! | q5    | revolute  | arm joint about local X                |
//! | q6    | revolute  | arm joint about local Y                |
//! | q7    | revolute  | arm joint about local X                |
//! | q8    | prismatic | logical needle insertion depth along Z |
//!
//! The chain is `Tx(q1) Ty(q2) Tz(q3) Rz(q4) Tz(L0) Rx(q5) Tz(L1) Ry(q6) Tz(L2)
//! Rx(q7) Tz(L3 + d0 + q8)` and the needle axis is the final frame's +Z.
//! Angles are radians and lengths are meters throughout.

use nalgebra::{Matrix3, Matrix6, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

pub const DOF: usize = 8;

/// Characteristic length used to make prismatic and revolute columns
/// commensurate in the manipulability measure.
pub const CHARACTERISTIC_LENGTH: f64 = 0.07;

pub type Vec3 = Vector3<f64>;
pub type GeometricJacobian = SMatrix<f64, 6, DOF>;
pub type JointVector = SVector<f64, DOF>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KinematicsError {
    #[error("joint q{joint} = {value} outside limits [{lo}, {hi}]")]
    LimitViolation {
        /// 1-based joint index.
        joint: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("joint q{joint} is not finite")]
    NonFinite { joint: usize },
    #[error("invalid chain parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    Prismatic,
    Revolute,
}

pub const JOINT_KINDS: [JointKind; DOF] = [
    JointKind::Prismatic,
    JointKind::Prismatic,
    JointKind::Prismatic,
    JointKind::Revolute,
    JointKind::Revolute,
    JointKind::Revolute,
    JointKind::Revolute,
    JointKind::Prismatic,
];

/// A point in the robot's configuration space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointConfig(pub [f64; DOF]);

impl JointConfig {
    pub const HOME: JointConfig = JointConfig([0.0; DOF]);

    pub fn new(q: [f64; DOF]) -> Self {
        Self(q)
    }

    pub fn as_array(&self) -> &[f64; DOF] {
        &self.0
    }

    pub fn to_vector(&self) -> JointVector {
        JointVector::from_column_slice(&self.0)
    }

    pub fn from_vector(v: &JointVector) -> Self {
        let mut q = [0.0; DOF];
        q.copy_from_slice(v.as_slice());
        Self(q)
    }

    /// Linear interpolation; `s = 0` gives `self`, `s = 1` gives `other`.
    pub fn lerp(&self, other: &JointConfig, s: f64) -> JointConfig {
        let mut q = [0.0; DOF];
        for (j, qj) in q.iter_mut().enumerate() {
            *qj = self.0[j] + s * (other.0[j] - self.0[j]);
        }
        JointConfig(q)
    }

    /// Largest per-joint absolute difference.
    pub fn max_abs_diff(&self, other: &JointConfig) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn distance(&self, other: &JointConfig) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl std::ops::Index<usize> for JointConfig {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for JointConfig {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Closed interval of allowed values for one joint. An unbounded side is
/// written as `null` in JSON.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointRange {
    #[serde(serialize_with = "bound::ser", deserialize_with = "bound::de_lo")]
    pub lo: f64,
    #[serde(serialize_with = "bound::ser", deserialize_with = "bound::de_hi")]
    pub hi: f64,
}

mod bound {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn ser<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn de_lo<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }

    pub fn de_hi<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl JointRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointLimits(pub [JointRange; DOF]);

impl Default for JointLimits {
    fn default() -> Self {
        JointLimits([
            JointRange::new(-0.20, 0.20),
            JointRange::new(-0.20, 0.20),
            JointRange::new(-0.40, 0.40),
            JointRange::new(-PI, PI),
            JointRange::new(-2.0, 2.0),
            JointRange::new(-2.0, 2.0),
            JointRange::new(-2.0, 2.0),
            JointRange::new(0.0, f64::INFINITY),
        ])
    }
}

impl JointLimits {
    pub fn range(&self, joint: usize) -> JointRange {
        self.0[joint]
    }

    pub fn check(&self, q: &JointConfig) -> Result<(), KinematicsError> {
        for (j, (&v, r)) in q.0.iter().zip(self.0.iter()).enumerate() {
            if !v.is_finite() {
                return Err(KinematicsError::NonFinite { joint: j + 1 });
            }
            if !r.contains(v) {
                return Err(KinematicsError::LimitViolation {
                    joint: j + 1,
                    value: v,
                    lo: r.lo,
                    hi: r.hi,
                });
            }
        }
        Ok(())
    }

    pub fn is_valid(&self, q: &JointConfig) -> bool {
        self.check(q).is_ok()
    }

    pub fn clamp(&self, q: &JointConfig) -> JointConfig {
        let mut out = *q;
        for (v, r) in out.0.iter_mut().zip(self.0.iter()) {
            *v = r.clamp(*v);
        }
        out
    }

    /// Configuration with every bounded joint at the middle of its range and
    /// the insertion depth at zero.
    pub fn centered(&self) -> JointConfig {
        let mut q = [0.0; DOF];
        for (j, v) in q.iter_mut().enumerate().take(DOF - 1) {
            *v = self.0[j].center();
        }
        JointConfig(q)
    }
}

/// Link geometry of the chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainParams {
    /// Trunnion to arm mount offset.
    pub l0: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    /// Needle tip offset beyond the last link at zero insertion.
    pub d0: f64,
}

impl Default for ChainParams {
    fn default() -> Self {
        Self {
            l0: 0.10,
            l1: 0.07,
            l2: 0.07,
            l3: 0.07,
            d0: 0.05,
        }
    }
}

impl ChainParams {
    pub fn validate(&self) -> Result<(), KinematicsError> {
        for (name, v) in [
            ("l0", self.l0),
            ("l1", self.l1),
            ("l2", self.l2),
            ("l3", self.l3),
            ("d0", self.d0),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(KinematicsError::InvalidParams(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Needle tip position and unit axis (hub to tip).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeedlePose {
    pub tip: Vec3,
    pub axis: Vec3,
}

impl NeedlePose {
    pub fn new(tip: Vec3, axis: Vec3) -> Self {
        Self {
            tip,
            axis: axis.normalize(),
        }
    }

    /// Angle between the two needle axes.
    pub fn axis_angle_to(&self, other: &NeedlePose) -> f64 {
        // atan2 form stays accurate for tiny angles
        let c = self.axis.dot(&other.axis);
        let s = self.axis.cross(&other.axis).norm();
        s.atan2(c)
    }
}

/// Poses of every joint axis plus the link points used for collision
/// geometry, evaluated at one configuration.
#[derive(Debug, Clone)]
pub struct ChainFrames {
    /// World-frame unit axis of each joint.
    pub axes: [Vec3; DOF],
    /// A world-frame point on each joint axis.
    pub origins: [Vec3; DOF],
    /// Back-end carriage point (after the X-Y-Z stage).
    pub carriage: Vec3,
    /// Arm mount, `L0` above the trunnion.
    pub mount: Vec3,
    /// End of link 1.
    pub elbow: Vec3,
    /// End of link 2.
    pub wrist: Vec3,
    /// End of link 3, where the insertion stage and needle hub sit.
    pub hub: Vec3,
    pub tip: Vec3,
    /// Needle axis (final frame +Z).
    pub axis: Vec3,
}

impl ChainFrames {
    pub fn pose(&self) -> NeedlePose {
        NeedlePose {
            tip: self.tip,
            axis: self.axis,
        }
    }
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Orthonormal basis `[b1, b2]` of the plane perpendicular to `u`, seeded by
/// the world axis least aligned with `u` (lowest index wins ties).
pub fn perp_basis(u: &Vec3) -> (Vec3, Vec3) {
    let mut best = 0;
    for i in 1..3 {
        if u[i].abs() < u[best].abs() {
            best = i;
        }
    }
    let mut e = Vec3::zeros();
    e[best] = 1.0;
    let b1 = (e - u * u.dot(&e)).normalize();
    let b2 = u.cross(&b1);
    (b1, b2)
}

/// Kinematic model: chain geometry plus joint limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RobotModel {
    pub chain: ChainParams,
    pub limits: JointLimits,
}

impl RobotModel {
    pub fn new(chain: ChainParams, limits: JointLimits) -> Self {
        Self { chain, limits }
    }

    /// Evaluates every frame of the chain. Does not check joint limits.
    pub fn frames_unchecked(&self, q: &JointConfig) -> ChainFrames {
        let c = &self.chain;
        let q = &q.0;
        let ex = Vec3::x();
        let ey = Vec3::y();
        let ez = Vec3::z();

        let carriage = Vec3::new(q[0], q[1], q[2]);
        let r4 = rot_z(q[3]);
        let mount = carriage + r4 * ez * c.l0;
        let r5 = r4 * rot_x(q[4]);
        let elbow = mount + r5 * ez * c.l1;
        let r6 = r5 * rot_y(q[5]);
        let wrist = elbow + r6 * ez * c.l2;
        let r7 = r6 * rot_x(q[6]);
        let axis = r7 * ez;
        let hub = wrist + axis * c.l3;
        let tip = wrist + axis * (c.l3 + c.d0 + q[7]);

        ChainFrames {
            axes: [ex, ey, ez, ez, r4 * ex, r5 * ey, r6 * ex, axis],
            origins: [carriage, carriage, carriage, carriage, mount, elbow, wrist, hub],
            carriage,
            mount,
            elbow,
            wrist,
            hub,
            tip,
            axis,
        }
    }

    pub fn frames(&self, q: &JointConfig) -> Result<ChainFrames, KinematicsError> {
        self.limits.check(q)?;
        Ok(self.frames_unchecked(q))
    }

    pub fn forward_kinematics(&self, q: &JointConfig) -> Result<NeedlePose, KinematicsError> {
        Ok(self.frames(q)?.pose())
    }

    /// Columns are the tip's `(v, w)` per unit joint rate.
    pub fn geometric_jacobian(&self, q: &JointConfig) -> Result<GeometricJacobian, KinematicsError> {
        Ok(geometric_jacobian_from_frames(&self.frames(q)?))
    }

    pub fn task_jacobian(&self, q: &JointConfig) -> Result<TaskJacobian, KinematicsError> {
        let f = self.frames(q)?;
        let jg = geometric_jacobian_from_frames(&f);
        Ok(TaskJacobian::from_geometric(&jg, &f.axis))
    }

    /// Yoshikawa measure of the column-scaled task Jacobian.
    pub fn manipulability(&self, q: &JointConfig) -> Result<f64, KinematicsError> {
        let jt = self.task_jacobian(q)?;
        Ok(jt.manipulability())
    }

    /// Manipulability and the gradient of `ln w` with respect to `q`.
    ///
    /// Uses the world-frame form `w^2 = det(G)`, `G = J' J'^T + e e^T` with
    /// `J' = [Jv; P Jw] D`, `P = I - u u^T` and `e = (0, u)`, which avoids
    /// differentiating the perpendicular basis. With `G e = e`,
    /// `d ln w / dq_k = tr(G^-1 dJ'_k J'^T)`.
    pub fn manipulability_with_log_gradient(
        &self,
        q: &JointConfig,
    ) -> Result<(f64, JointVector), KinematicsError> {
        let f = self.frames(q)?;
        let jg = geometric_jacobian_from_frames(&f);
        let u = f.axis;
        let w = TaskJacobian::from_geometric(&jg, &u).manipulability();

        let p = Matrix3::identity() - u * u.transpose();
        let scale = column_scale();
        let mut jp = SMatrix::<f64, 6, DOF>::zeros();
        for i in 0..DOF {
            let v: Vec3 = jg.fixed_view::<3, 1>(0, i).into();
            let om: Vec3 = jg.fixed_view::<3, 1>(3, i).into();
            jp.fixed_view_mut::<3, 1>(0, i).copy_from(&(v * scale[i]));
            jp.fixed_view_mut::<3, 1>(3, i).copy_from(&(p * om * scale[i]));
        }
        let mut e = SVector::<f64, 6>::zeros();
        e.fixed_rows_mut::<3>(3).copy_from(&u);
        let g: Matrix6<f64> = jp * jp.transpose() + e * e.transpose();
        let mut grad = JointVector::zeros();
        let Some(g_inv) = g.try_inverse() else {
            return Ok((w, grad));
        };

        for k in 0..DOF {
            let djg = jacobian_derivative(&f, &jg, k);
            // derivative of the needle axis
            let om_k: Vec3 = jg.fixed_view::<3, 1>(3, k).into();
            let du = om_k.cross(&u);
            let dp = -(du * u.transpose() + u * du.transpose());
            let mut djp = SMatrix::<f64, 6, DOF>::zeros();
            for i in 0..DOF {
                let dv: Vec3 = djg.fixed_view::<3, 1>(0, i).into();
                let om: Vec3 = jg.fixed_view::<3, 1>(3, i).into();
                let dom: Vec3 = djg.fixed_view::<3, 1>(3, i).into();
                djp.fixed_view_mut::<3, 1>(0, i).copy_from(&(dv * scale[i]));
                djp.fixed_view_mut::<3, 1>(3, i)
                    .copy_from(&((dp * om + p * dom) * scale[i]));
            }
            grad[k] = (g_inv * djp * jp.transpose()).trace();
        }
        Ok((w, grad))
    }

    /// Distance-from-limits score in `[0, 1]`: 1 with every bounded joint
    /// centered, 0 with any joint at a limit. The insertion depth is ignored.
    pub fn joint_limit_margin(&self, q: &JointConfig) -> Result<f64, KinematicsError> {
        self.limits.check(q)?;
        Ok(joint_limit_margin_unchecked(&self.limits, q))
    }
}

pub(crate) fn joint_limit_margin_unchecked(limits: &JointLimits, q: &JointConfig) -> f64 {
    (0..DOF - 1)
        .map(|j| {
            let r = limits.0[j];
            let w = r.width();
            (4.0 * (q[j] - r.lo) * (r.hi - q[j]) / (w * w)).clamp(0.0, 1.0)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Per-column scale: prismatic columns are divided by the characteristic length.
pub fn column_scale() -> [f64; DOF] {
    let mut s = [1.0; DOF];
    for (j, k) in JOINT_KINDS.iter().enumerate() {
        if *k == JointKind::Prismatic {
            s[j] = 1.0 / CHARACTERISTIC_LENGTH;
        }
    }
    s
}

pub fn geometric_jacobian_from_frames(f: &ChainFrames) -> GeometricJacobian {
    let mut j = GeometricJacobian::zeros();
    for i in 0..DOF {
        let a = f.axes[i];
        match JOINT_KINDS[i] {
            JointKind::Prismatic => {
                j.fixed_view_mut::<3, 1>(0, i).copy_from(&a);
            }
            JointKind::Revolute => {
                let v = a.cross(&(f.tip - f.origins[i]));
                j.fixed_view_mut::<3, 1>(0, i).copy_from(&v);
                j.fixed_view_mut::<3, 1>(3, i).copy_from(&a);
            }
        }
    }
    j
}

/// Velocity Jacobian (3 x DOF) of a point rigidly attached to the body that
/// follows joint `last` (0-based). Columns of later joints are zero.
pub fn point_jacobian(f: &ChainFrames, point: &Vec3, last: usize) -> SMatrix<f64, 3, DOF> {
    let mut j = SMatrix::<f64, 3, DOF>::zeros();
    for i in 0..=last.min(DOF - 1) {
        let a = f.axes[i];
        let v = match JOINT_KINDS[i] {
            JointKind::Prismatic => a,
            JointKind::Revolute => a.cross(&(point - f.origins[i])),
        };
        j.fixed_view_mut::<3, 1>(0, i).copy_from(&v);
    }
    j
}

/// `dJ/dq_k` of the geometric Jacobian.
fn jacobian_derivative(f: &ChainFrames, jg: &GeometricJacobian, k: usize) -> GeometricJacobian {
    let mut d = GeometricJacobian::zeros();
    let jv_k: Vec3 = jg.fixed_view::<3, 1>(0, k).into();
    let a_k = f.axes[k];
    for i in 0..DOF {
        let jv: Vec3 = jg.fixed_view::<3, 1>(0, i).into();
        let jw: Vec3 = jg.fixed_view::<3, 1>(3, i).into();
        if k < i {
            // everything distal to joint k rotates about a_k
            if JOINT_KINDS[k] == JointKind::Revolute {
                d.fixed_view_mut::<3, 1>(0, i).copy_from(&a_k.cross(&jv));
                d.fixed_view_mut::<3, 1>(3, i).copy_from(&a_k.cross(&jw));
            }
        } else if JOINT_KINDS[i] == JointKind::Revolute {
            // only the tip moves relative to joint i
            d.fixed_view_mut::<3, 1>(0, i)
                .copy_from(&f.axes[i].cross(&jv_k));
        }
    }
    d
}

/// 5 x DOF Jacobian of the needle task: tip linear velocity followed by the
/// angular rate projected on an orthonormal basis of the plane normal to the
/// needle axis. Roll about the needle is not part of the task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskJacobian {
    pub matrix: SMatrix<f64, 5, DOF>,
    pub basis: (Vec3, Vec3),
}

impl TaskJacobian {
    pub fn from_geometric(jg: &GeometricJacobian, u: &Vec3) -> Self {
        Self::with_basis(jg, perp_basis(u))
    }

    /// Same as [`TaskJacobian::from_geometric`] with a caller-chosen basis.
    pub fn with_basis(jg: &GeometricJacobian, basis: (Vec3, Vec3)) -> Self {
        let mut m = SMatrix::<f64, 5, DOF>::zeros();
        m.fixed_view_mut::<3, DOF>(0, 0)
            .copy_from(&jg.fixed_view::<3, DOF>(0, 0));
        let ang = jg.fixed_view::<3, DOF>(3, 0);
        m.fixed_view_mut::<1, DOF>(3, 0)
            .copy_from(&(basis.0.transpose() * ang));
        m.fixed_view_mut::<1, DOF>(4, 0)
            .copy_from(&(basis.1.transpose() * ang));
        Self { matrix: m, basis }
    }

    pub fn scaled(&self) -> SMatrix<f64, 5, DOF> {
        let s = column_scale();
        let mut m = self.matrix;
        for (j, sj) in s.iter().enumerate() {
            m.column_mut(j).scale_mut(*sj);
        }
        m
    }

    pub fn manipulability(&self) -> f64 {
        let m = self.scaled();
        let det = (m * m.transpose()).determinant();
        det.max(0.0).sqrt()
    }
}
