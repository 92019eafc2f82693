use super::{Objective, PlanningContext, PlanningError, SetupObjectiveWeights};
use crate::kinematics::{
    geometric_jacobian_from_frames, perp_basis, JointConfig, JointVector, NeedlePose, TaskJacobian, Vec3, DOF,
};
use nalgebra::{Rotation3, SMatrix, SVector, Unit};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeleopOptions {
    pub damping: f64,
    /// Gain on the objective gradient in the nullspace term (1/s).
    pub nullspace_gain: f64,
    /// Largest per-joint nullspace motion in one step.
    pub max_nullspace_step: f64,
    /// Jog caps applied to the commanded twist.
    pub max_linear_speed: f64,
    pub max_angular_speed: f64,
    pub locked: [bool; DOF],
}

impl Default for TeleopOptions {
    fn default() -> Self {
        let mut locked = [false; DOF];
        locked[DOF - 1] = true;
        Self {
            damping: 0.01,
            nullspace_gain: 0.1,
            max_nullspace_step: 1e-3,
            max_linear_speed: 0.01,
            max_angular_speed: 0.1,
            locked,
        }
    }
}

fn masked_jacobian(ctx: &PlanningContext, q: &JointConfig, locked: &[bool; DOF]) -> (SMatrix<f64, 5, DOF>, (Vec3, Vec3)) {
    let f = ctx.model.frames_unchecked(q);
    let basis = perp_basis(&f.axis);
    let mut j = TaskJacobian::with_basis(&geometric_jacobian_from_frames(&f), basis).matrix;
    for (k, l) in locked.iter().enumerate() {
        if *l {
            j.column_mut(k).fill(0.0);
        }
    }
    (j, basis)
}

fn damped_pinv(j: &SMatrix<f64, 5, DOF>, lambda: f64) -> SMatrix<f64, DOF, 5> {
    let jjt = j * j.transpose() + SMatrix::<f64, 5, 5>::identity() * (lambda * lambda);
    match jjt.cholesky() {
        Some(c) => j.transpose() * c.inverse(),
        None => SMatrix::zeros(),
    }
}

fn nullspace_projector(j: &SMatrix<f64, 5, DOF>, locked: &[bool; DOF]) -> SMatrix<f64, DOF, DOF> {
    let pinv = j.pseudo_inverse(1e-10).unwrap_or_else(|_| SMatrix::zeros());
    let mut n = SMatrix::<f64, DOF, DOF>::identity() - pinv * j;
    for (k, l) in locked.iter().enumerate() {
        if *l {
            n.row_mut(k).fill(0.0);
            n.column_mut(k).fill(0.0);
        }
    }
    n
}

fn task_residual(ctx: &PlanningContext, q: &JointConfig, target: &NeedlePose) -> SVector<f64, 5> {
    let f = ctx.model.frames_unchecked(q);
    let (dp, rot) = super::pose_error(&f.pose(), target);
    let (b1, b2) = perp_basis(&f.axis);
    SVector::<f64, 5>::new(dp.x, dp.y, dp.z, b1.dot(&rot), b2.dot(&rot))
}

/// Pose the commanded twist reaches after `dt` from `pose`.
fn advance_pose(pose: &NeedlePose, basis: (Vec3, Vec3), v: &SVector<f64, 5>, dt: f64) -> NeedlePose {
    let lin = Vec3::new(v[0], v[1], v[2]);
    let omega = basis.0 * v[3] + basis.1 * v[4];
    let angle = omega.norm() * dt;
    let axis = if angle > 0.0 {
        Rotation3::from_axis_angle(&Unit::new_normalize(omega), angle) * pose.axis
    } else {
        pose.axis
    };
    NeedlePose::new(pose.tip + lin * dt, axis)
}

/// Solves `dq` for the twist and the objective gradient, locking any joint
/// the step would push past its limit and solving again.
fn solve_step(
    ctx: &PlanningContext,
    q: &JointConfig,
    target: &NeedlePose,
    nullspace: &JointVector,
    opts: &TeleopOptions,
) -> JointConfig {
    let mut locked = opts.locked;
    loop {
        let (j, _) = masked_jacobian(ctx, q, &locked);
        let pinv = damped_pinv(&j, opts.damping);
        let mut null = nullspace_projector(&j, &locked) * nullspace;
        let m = null.amax();
        if m > opts.max_nullspace_step {
            null *= opts.max_nullspace_step / m;
        }
        let mut qn = JointConfig::from_vector(&(q.to_vector() + pinv * task_residual(ctx, q, target) + null));
        // re-project onto the commanded pose with the same locked set
        for _ in 0..3 {
            let e = task_residual(ctx, &qn, target);
            let (jn, _) = masked_jacobian(ctx, &qn, &locked);
            qn = JointConfig::from_vector(&(qn.to_vector() + damped_pinv(&jn, opts.damping) * e));
        }
        let newly: Vec<usize> = (0..DOF)
            .filter(|&k| !locked[k] && !ctx.model.limits.0[k].contains(qn[k]))
            .collect();
        if newly.is_empty() {
            return qn;
        }
        for k in newly {
            locked[k] = true;
        }
        if locked.iter().all(|l| *l) {
            return *q;
        }
    }
}

/// One resolved-rate teleoperation step: the commanded task twist
/// `v_task = (v, omega_b1, omega_b2)` through a damped pseudoinverse plus
/// gradient ascent of the setup objective in the task nullspace. The
/// angular rows use the same basis of the plane orthogonal to the needle
/// axis as [`TaskJacobian::from_geometric`].
pub fn resolved_rate_step(
    ctx: &PlanningContext,
    weights: &SetupObjectiveWeights,
    q: &JointConfig,
    v_task: &SVector<f64, 5>,
    dt: f64,
    opts: &TeleopOptions,
) -> Result<JointConfig, PlanningError> {
    ctx.model.limits.check(q)?;
    let mut v = *v_task;
    let lin = v.fixed_rows::<3>(0).norm();
    if lin > opts.max_linear_speed {
        v.fixed_rows_mut::<3>(0).scale_mut(opts.max_linear_speed / lin);
    }
    let ang = v.fixed_rows::<2>(3).norm();
    if ang > opts.max_angular_speed {
        v.fixed_rows_mut::<2>(3).scale_mut(opts.max_angular_speed / ang);
    }

    let f = ctx.model.frames_unchecked(q);
    let target = advance_pose(&f.pose(), perp_basis(&f.axis), &v, dt);
    let obj = Objective::new(ctx, *weights);
    let grad = if opts.nullspace_gain > 0.0 {
        obj.normalized_gradient(q)? * (opts.nullspace_gain * dt)
    } else {
        JointVector::zeros()
    };
    let pure_nullspace = v == SVector::<f64, 5>::zeros();
    let u0 = if pure_nullspace { obj.normalized_value(q)? } else { 0.0 };

    let mut scale = 1.0;
    for _ in 0..12 {
        let qn = solve_step(ctx, q, &target, &(grad * scale), opts);
        if !pure_nullspace {
            return Ok(qn);
        }
        if obj.normalized_value(&qn).is_ok_and(|u| u >= u0) {
            return Ok(qn);
        }
        scale *= 0.5;
    }
    Ok(*q)
}
