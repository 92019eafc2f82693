//! Capsule scene model and clearance queries.
//!
//! Every solid is a capsule (a segment swept by a sphere) except the CT
//! bore, which is an infinite cylinder the robot must stay inside.
//! Clearance is a signed distance: negative values are penetration depth.

use crate::kinematics::{point_jacobian, ChainFrames, JointConfig, JointVector, KinematicsError, RobotModel, Vec3, DOF};
use crate::registration::RigidTransform;
use nalgebra::SMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("bore radius must be positive, got {0}")]
    BoreRadius(f64),
    #[error("bore axis direction must be nonzero")]
    BoreAxis,
    #[error("patient capsule {0} has non-positive radius")]
    CapsuleRadius(usize),
    #[error("scene needs at least 3 non-collinear fiducials")]
    Fiducials,
    #[error("non-finite coordinate in scene")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub r: f64,
}

impl Capsule {
    pub fn new(a: Vec3, b: Vec3, r: f64) -> Self {
        Self { a, b, r }
    }

    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self {
            a: t.apply(&self.a),
            b: t.apply(&self.b),
            r: self.r,
        }
    }

    /// Signed surface distance between two capsules.
    pub fn distance(&self, other: &Capsule) -> f64 {
        segment_distance(&self.a, &self.b, &other.a, &other.b) - self.r - other.r
    }
}

/// Infinite cylinder the robot must remain inside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bore {
    pub axis_point: Vec3,
    pub axis_dir: Vec3,
    pub radius: f64,
}

impl Bore {
    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self {
            axis_point: t.apply(&self.axis_point),
            axis_dir: t.apply_vector(&self.axis_dir),
            radius: self.radius,
        }
    }

    /// Radial offset of `p` from the axis (vector, perpendicular to the axis).
    pub fn radial(&self, p: &Vec3) -> Vec3 {
        let d = self.axis_dir.normalize();
        let rel = p - self.axis_point;
        rel - d * d.dot(&rel)
    }

    /// Signed distance from a capsule to the bore wall, positive inside.
    /// The radial distance is convex along the segment so the worst point is
    /// an endpoint.
    pub fn containment(&self, c: &Capsule) -> f64 {
        let ra = self.radial(&c.a).norm();
        let rb = self.radial(&c.b).norm();
        self.radius - c.r - ra.max(rb)
    }
}

/// Synthetic CT scene, expressed in the scanner frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub bore: Bore,
    #[serde(default)]
    pub patient: Vec<Capsule>,
    pub fiducials: Vec<[f64; 3]>,
    pub target: Vec3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_hint: Option<Vec3>,
}

impl Scene {
    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.bore.radius.is_finite() && self.bore.radius > 0.0) {
            return Err(SceneError::BoreRadius(self.bore.radius));
        }
        if !(self.bore.axis_dir.norm() > 0.0) {
            return Err(SceneError::BoreAxis);
        }
        for (i, c) in self.patient.iter().enumerate() {
            if !(c.r > 0.0) {
                return Err(SceneError::CapsuleRadius(i));
            }
            if !(c.a.iter().chain(c.b.iter()).all(|v| v.is_finite())) {
                return Err(SceneError::NonFinite);
            }
        }
        if !self.target.iter().all(|v| v.is_finite()) {
            return Err(SceneError::NonFinite);
        }
        if self.fiducials.len() < 3 || collinear(&self.fiducials) {
            return Err(SceneError::Fiducials);
        }
        Ok(())
    }

    pub fn fiducial_points(&self) -> Vec<Vec3> {
        self.fiducials
            .iter()
            .map(|p| Vec3::new(p[0], p[1], p[2]))
            .collect()
    }
}

fn collinear(pts: &[[f64; 3]]) -> bool {
    let p: Vec<Vec3> = pts.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect();
    let scale = p
        .iter()
        .flat_map(|a| p.iter().map(move |b| (a - b).norm()))
        .fold(0.0, f64::max);
    if scale == 0.0 {
        return true;
    }
    for i in 0..p.len() {
        for j in 0..p.len() {
            for k in 0..p.len() {
                let area = (p[j] - p[i]).cross(&(p[k] - p[i])).norm();
                if area > 1e-9 * scale * scale {
                    return false;
                }
            }
        }
    }
    true
}

/// Collision geometry in the robot base frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionWorld {
    pub bore: Option<Bore>,
    pub obstacles: Vec<Capsule>,
}

impl CollisionWorld {
    pub fn empty() -> Self {
        Self {
            bore: None,
            obstacles: Vec::new(),
        }
    }

    /// Moves a scanner-frame scene into the robot frame, given the
    /// robot-to-scanner calibration.
    pub fn from_scene(scene: &Scene, robot_to_scanner: &RigidTransform) -> Self {
        let inv = robot_to_scanner.inverse();
        Self {
            bore: Some(scene.bore.transformed(&inv)),
            obstacles: scene.patient.iter().map(|c| c.transformed(&inv)).collect(),
        }
    }
}

/// Radii of the robot's collision capsules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotShape {
    pub trunnion_radius: f64,
    pub link_radii: [f64; 3],
    pub stage_radius: f64,
    /// Length of the insertion stage housing along the needle axis.
    pub stage_length: f64,
}

impl Default for RobotShape {
    fn default() -> Self {
        Self {
            trunnion_radius: 0.03,
            link_radii: [0.015, 0.012, 0.010],
            stage_radius: 0.012,
            stage_length: 0.03,
        }
    }
}

impl RobotShape {
    pub fn max_radius(&self) -> f64 {
        self.link_radii
            .iter()
            .copied()
            .chain([self.trunnion_radius, self.stage_radius])
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Body {
    Trunnion,
    Link1,
    Link2,
    Link3,
    Stage,
    Needle,
}

/// A robot capsule plus the last joint (0-based) moving each endpoint.
#[derive(Debug, Clone, Copy)]
pub struct RobotCapsule {
    pub body: Body,
    pub capsule: Capsule,
    pub a_joint: usize,
    pub b_joint: usize,
}

/// Capsules of the moving bodies: trunnion, three arm links and the
/// insertion stage.
pub fn link_capsules(
    model: &RobotModel,
    q: &JointConfig,
    shape: &RobotShape,
) -> Result<Vec<Capsule>, KinematicsError> {
    let f = model.frames(q)?;
    Ok(robot_capsules(&f, shape)
        .into_iter()
        .filter(|c| c.body != Body::Needle)
        .map(|c| c.capsule)
        .collect())
}

/// Link capsules followed by the zero-radius needle segment (hub to tip).
pub fn robot_capsules(f: &ChainFrames, shape: &RobotShape) -> Vec<RobotCapsule> {
    let stage_end = f.hub + f.axis * shape.stage_length;
    vec![
        RobotCapsule {
            body: Body::Trunnion,
            capsule: Capsule::new(f.carriage, f.mount, shape.trunnion_radius),
            a_joint: 3,
            b_joint: 3,
        },
        RobotCapsule {
            body: Body::Link1,
            capsule: Capsule::new(f.mount, f.elbow, shape.link_radii[0]),
            a_joint: 4,
            b_joint: 4,
        },
        RobotCapsule {
            body: Body::Link2,
            capsule: Capsule::new(f.elbow, f.wrist, shape.link_radii[1]),
            a_joint: 5,
            b_joint: 5,
        },
        RobotCapsule {
            body: Body::Link3,
            capsule: Capsule::new(f.wrist, f.hub, shape.link_radii[2]),
            a_joint: 6,
            b_joint: 6,
        },
        RobotCapsule {
            body: Body::Stage,
            capsule: Capsule::new(f.hub, stage_end, shape.stage_radius),
            a_joint: 6,
            b_joint: 6,
        },
        RobotCapsule {
            body: Body::Needle,
            capsule: Capsule::new(f.hub, f.tip, 0.0),
            a_joint: 6,
            b_joint: 7,
        },
    ]
}

/// Query options.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CollisionOptions {
    /// Length of needle, measured back from the tip, that is allowed to
    /// intersect patient capsules. Zero until insertion begins.
    pub needle_exempt_length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Witness {
    Bore { body: Body },
    Obstacle { body: Body, obstacle: usize },
    Free,
}

/// Minimum signed clearance and the pair that attains it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clearance {
    pub value: f64,
    pub witness: Witness,
}

/// Clearance of a configuration against the world. `+inf` for an empty world.
pub fn clearance(
    model: &RobotModel,
    q: &JointConfig,
    world: &CollisionWorld,
    shape: &RobotShape,
    opts: &CollisionOptions,
) -> Result<f64, KinematicsError> {
    let f = model.frames(q)?;
    Ok(clearance_from_frames(&f, world, shape, opts).value)
}

/// Consistent with [`clearance`]: true iff the clearance is negative.
pub fn in_collision(
    model: &RobotModel,
    q: &JointConfig,
    world: &CollisionWorld,
    shape: &RobotShape,
    opts: &CollisionOptions,
) -> Result<bool, KinematicsError> {
    Ok(clearance(model, q, world, shape, opts)? < 0.0)
}

fn needle_segment_for_patient(c: &Capsule, exempt: f64) -> Option<Capsule> {
    if exempt <= 0.0 {
        return Some(*c);
    }
    let len = (c.b - c.a).norm();
    if exempt >= len {
        return None;
    }
    let dir = (c.b - c.a) / len;
    Some(Capsule::new(c.a, c.b - dir * exempt, 0.0))
}

pub fn clearance_from_frames(
    f: &ChainFrames,
    world: &CollisionWorld,
    shape: &RobotShape,
    opts: &CollisionOptions,
) -> Clearance {
    let mut best = Clearance {
        value: f64::INFINITY,
        witness: Witness::Free,
    };
    for rc in robot_capsules(f, shape) {
        if let Some(bore) = &world.bore {
            let d = bore.containment(&rc.capsule);
            if d < best.value {
                best = Clearance {
                    value: d,
                    witness: Witness::Bore { body: rc.body },
                };
            }
        }
        let cap = if rc.body == Body::Needle {
            match needle_segment_for_patient(&rc.capsule, opts.needle_exempt_length) {
                Some(c) => c,
                None => continue,
            }
        } else {
            rc.capsule
        };
        for (i, obs) in world.obstacles.iter().enumerate() {
            let d = cap.distance(obs);
            if d < best.value {
                best = Clearance {
                    value: d,
                    witness: Witness::Obstacle {
                        body: rc.body,
                        obstacle: i,
                    },
                };
            }
        }
    }
    best
}

/// Clearance and its gradient with respect to the joints, taken from the
/// active (minimizing) pair. The gradient is zero for an empty world.
pub fn clearance_with_gradient(
    f: &ChainFrames,
    world: &CollisionWorld,
    shape: &RobotShape,
    opts: &CollisionOptions,
) -> (Clearance, JointVector) {
    let c = clearance_from_frames(f, world, shape, opts);
    let mut grad = JointVector::zeros();
    let capsules = robot_capsules(f, shape);
    let find = |body: Body| capsules.iter().find(|rc| rc.body == body).copied();

    // Velocity Jacobian of the point at parameter s along a robot capsule.
    let point_jac = |rc: &RobotCapsule, seg: &Capsule, s: f64| -> SMatrix<f64, 3, DOF> {
        let ja = point_jacobian(f, &seg.a, rc.a_joint);
        let jb = point_jacobian(f, &seg.b, rc.b_joint);
        ja * (1.0 - s) + jb * s
    };

    match c.witness {
        Witness::Free => {}
        Witness::Bore { body } => {
            let (Some(rc), Some(bore)) = (find(body), world.bore.as_ref()) else {
                return (c, grad);
            };
            let cap = rc.capsule;
            let (ra, rb) = (bore.radial(&cap.a), bore.radial(&cap.b));
            let (s, radial) = if ra.norm() >= rb.norm() { (0.0, ra) } else { (1.0, rb) };
            let n = radial.norm();
            if n > 0.0 {
                let dir = bore.axis_dir.normalize();
                let j = point_jac(&rc, &cap, s);
                // d|radial|/dx = radial_hat projected off the axis
                let rhat = radial / n;
                let rhat = rhat - dir * dir.dot(&rhat);
                grad = -(j.transpose() * rhat);
            }
        }
        Witness::Obstacle { body, obstacle } => {
            let Some(rc) = find(body) else {
                return (c, grad);
            };
            let seg = if body == Body::Needle {
                needle_segment_for_patient(&rc.capsule, opts.needle_exempt_length)
                    .unwrap_or(rc.capsule)
            } else {
                rc.capsule
            };
            let obs = &world.obstacles[obstacle];
            let cp = closest_points(&seg.a, &seg.b, &obs.a, &obs.b);
            let delta = cp.p1 - cp.p2;
            let n = delta.norm();
            if n > 0.0 {
                // the needle's shortened segment shares hub and direction
                let s = if body == Body::Needle {
                    let full = (rc.capsule.b - rc.capsule.a).norm();
                    cp.s * (seg.b - seg.a).norm() / full
                } else {
                    cp.s
                };
                let j = point_jac(&rc, &rc.capsule, s);
                grad = j.transpose() * (delta / n);
            }
        }
    }
    (c, grad)
}

/// Closest points between two segments with their parameters.
#[derive(Debug, Clone, Copy)]
pub struct ClosestPoints {
    pub s: f64,
    pub t: f64,
    pub p1: Vec3,
    pub p2: Vec3,
}

/// Closest points between segments `[p1, q1]` and `[p2, q2]`, following the
/// clamped-parameter method for segment pairs (handles degenerate
/// segments and parallel pairs).
pub fn closest_points(p1: &Vec3, q1: &Vec3, p2: &Vec3, q2: &Vec3) -> ClosestPoints {
    const EPS: f64 = 1e-18;
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);

    let (s, t);
    if a <= EPS && e <= EPS {
        s = 0.0;
        t = 0.0;
    } else if a <= EPS {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= EPS {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > EPS * a * e {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    ClosestPoints {
        s,
        t,
        p1: p1 + d1 * s,
        p2: p2 + d2 * t,
    }
}

/// Euclidean distance between two 3D segments.
pub fn segment_distance(a1: &Vec3, b1: &Vec3, a2: &Vec3, b2: &Vec3) -> f64 {
    let cp = closest_points(a1, b1, a2, b2);
    (cp.p1 - cp.p2).norm()
}
