use super::PlanningError;
use crate::kinematics::{
    geometric_jacobian_from_frames, perp_basis, ChainFrames, JointConfig, JointVector, NeedlePose,
    RobotModel, TaskJacobian, DOF,
};
use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IkOptions {
    pub damping: f64,
    pub max_iterations: usize,
    /// Largest per-joint change in one iteration (rad or m).
    pub step_clamp: f64,
    pub position_tolerance: f64,
    pub angle_tolerance: f64,
    /// Targets farther than this from the robot origin are rejected outright.
    pub workspace_radius: f64,
    /// Joints held at their seed value.
    pub locked: [bool; DOF],
}

impl Default for IkOptions {
    fn default() -> Self {
        Self {
            damping: 0.01,
            max_iterations: 500,
            step_clamp: 0.2,
            position_tolerance: 1e-7,
            angle_tolerance: 1e-7,
            workspace_radius: 1.0,
            locked: [false; DOF],
        }
    }
}

impl IkOptions {
    /// Insertion depth held fixed: the needle only moves through the clutches.
    pub fn with_locked_insertion(mut self) -> Self {
        self.locked[DOF - 1] = true;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IkSolution {
    pub config: JointConfig,
    pub iterations: usize,
    pub position_error: f64,
    pub angle_error: f64,
}

/// Position error vector and rotation vector taking the current needle axis
/// onto the target axis.
pub fn pose_error(current: &NeedlePose, target: &NeedlePose) -> (nalgebra::Vector3<f64>, nalgebra::Vector3<f64>) {
    let dp = target.tip - current.tip;
    let cross = current.axis.cross(&target.axis);
    let s = cross.norm();
    let angle = s.atan2(current.axis.dot(&target.axis));
    let rot = if s > 1e-300 {
        cross * (angle / s)
    } else if angle > 1.0 {
        // antiparallel: rotate about any perpendicular axis
        perp_basis(&current.axis).0 * angle
    } else {
        nalgebra::Vector3::zeros()
    };
    (dp, rot)
}

fn residual(f: &ChainFrames, target: &NeedlePose) -> (SVector<f64, 5>, f64, f64) {
    let (dp, rot) = pose_error(&f.pose(), target);
    let (b1, b2) = perp_basis(&f.axis);
    let e = SVector::<f64, 5>::new(dp.x, dp.y, dp.z, b1.dot(&rot), b2.dot(&rot));
    (e, dp.norm(), f.pose().axis_angle_to(target))
}

/// Damped least-squares solve of the 5-DoF needle pose.
pub fn solve_pose_ik(
    model: &RobotModel,
    target: &NeedlePose,
    seed: &JointConfig,
    opts: &IkOptions,
) -> Result<IkSolution, PlanningError> {
    model.limits.check(seed)?;
    if !(target.tip.norm() <= opts.workspace_radius) || !target.axis.iter().all(|v| v.is_finite()) {
        return Err(PlanningError::Unreachable {
            position: f64::INFINITY,
            angle: f64::INFINITY,
        });
    }
    let lambda2 = opts.damping * opts.damping;
    let mut q = *seed;
    let mut best = (f64::INFINITY, f64::INFINITY);

    for iter in 0..=opts.max_iterations {
        let f = model.frames_unchecked(&q);
        let (e, pos_err, ang_err) = residual(&f, target);
        if pos_err + ang_err < best.0 + best.1 {
            best = (pos_err, ang_err);
        }
        if pos_err <= opts.position_tolerance && ang_err <= opts.angle_tolerance {
            return Ok(IkSolution {
                config: q,
                iterations: iter,
                position_error: pos_err,
                angle_error: ang_err,
            });
        }
        if iter == opts.max_iterations {
            break;
        }
        let jg = geometric_jacobian_from_frames(&f);
        let mut j: SMatrix<f64, 5, DOF> = TaskJacobian::from_geometric(&jg, &f.axis).matrix;
        for (k, locked) in opts.locked.iter().enumerate() {
            let at_limit = {
                let r = model.limits.0[k];
                (q[k] <= r.lo && j.column(k).dot(&e) < 0.0) || (q[k] >= r.hi && j.column(k).dot(&e) > 0.0)
            };
            if *locked || at_limit {
                j.column_mut(k).fill(0.0);
            }
        }
        let jjt = j * j.transpose() + SMatrix::<f64, 5, 5>::identity() * lambda2;
        let Some(y) = jjt.cholesky().map(|c| c.solve(&e)) else {
            break;
        };
        let mut dq: JointVector = j.transpose() * y;
        let m = dq.amax();
        if m > opts.step_clamp {
            dq *= opts.step_clamp / m;
        }
        q = model.limits.clamp(&JointConfig::from_vector(&(q.to_vector() + dq)));
    }
    Err(PlanningError::Unreachable {
        position: best.0,
        angle: best.1,
    })
}
