use super::{JointPath, JointTrajectory, MotionLimits, PlanningContext};
use crate::kinematics::{JointConfig, JointKind, DOF, JOINT_KINDS};

#[derive(Debug, Clone, PartialEq)]
pub enum AuditViolation {
    Limits { at: JointConfig },
    Collision { at: JointConfig, clearance: f64 },
    Velocity { t_ns: u64, joint: usize, value: f64 },
    Acceleration { t_ns: u64, joint: usize, value: f64 },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditReport {
    pub checked: usize,
    pub violations: Vec<AuditViolation>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn check_config(ctx: &PlanningContext, q: &JointConfig, rep: &mut AuditReport) {
    rep.checked += 1;
    if !ctx.model.limits.is_valid(q) {
        rep.violations.push(AuditViolation::Limits { at: *q });
        return;
    }
    let c = ctx.clearance(q).unwrap_or(f64::NEG_INFINITY);
    if c < 0.0 {
        rep.violations.push(AuditViolation::Collision { at: *q, clearance: c });
    }
}

/// Re-checks every waypoint and every interpolated configuration no more
/// than `revolute_step` rad / `prismatic_step` m apart on any joint.
pub fn audit_path(ctx: &PlanningContext, path: &JointPath, revolute_step: f64, prismatic_step: f64) -> AuditReport {
    let mut rep = AuditReport::default();
    let Some(first) = path.waypoints.first() else {
        return rep;
    };
    check_config(ctx, first, &mut rep);
    for w in path.waypoints.windows(2) {
        let n = (0..DOF)
            .map(|j| {
                let step = match JOINT_KINDS[j] {
                    JointKind::Revolute => revolute_step,
                    JointKind::Prismatic => prismatic_step,
                };
                ((w[1][j] - w[0][j]).abs() / step).ceil() as usize
            })
            .max()
            .unwrap_or(0)
            .max(1);
        for i in 1..=n {
            let q = if i == n { w[1] } else { w[0].lerp(&w[1], i as f64 / n as f64) };
            check_config(ctx, &q, &mut rep);
        }
    }
    rep
}

/// Numeric-difference check of the 1 kHz samples against `limits`, with a
/// relative slack of 1e-9 for rounding.
pub fn audit_trajectory(traj: &JointTrajectory, limits: &MotionLimits) -> AuditReport {
    let mut rep = AuditReport::default();
    let s = traj.samples();
    let dt = 1e-3;
    let slack = 1.0 + 1e-9;
    let mut prev_v: Option<[f64; DOF]> = None;
    for w in s.windows(2) {
        rep.checked += 1;
        let t_ns = w[1].0;
        let v: [f64; DOF] = std::array::from_fn(|j| (w[1].1[j] - w[0].1[j]) / dt);
        for j in 0..DOF {
            if v[j].abs() > limits.v_max[j] * slack {
                rep.violations.push(AuditViolation::Velocity { t_ns, joint: j + 1, value: v[j] });
            }
            if let Some(pv) = prev_v {
                let a = (v[j] - pv[j]) / dt;
                if a.abs() > limits.a_max[j] * slack + 1e-9 {
                    rep.violations.push(AuditViolation::Acceleration { t_ns, joint: j + 1, value: a });
                }
            }
        }
        prev_v = Some(v);
    }
    rep
}
