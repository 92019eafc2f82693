use crate::kinematics::{JointConfig, NeedlePose};
use crate::planning::{
    audit_path, audit_trajectory, optimize_setup_config, plan_path, time_parameterize, JointPath, JointTrajectory,
    MotionLimits, PlannerConfig, PlanningContext, PlanningError, SetupObjectiveWeights, SetupOptions, SetupResult,
};
use std::sync::atomic::{AtomicBool, Ordering};

/// Everything a planning job needs; owned so the job can run on its own thread.
#[derive(Debug, Clone)]
pub struct PlanRequest {
    pub ctx: PlanningContext,
    /// Desired needle pose before insertion, robot frame.
    pub setup_pose: NeedlePose,
    pub start: JointConfig,
    pub weights: SetupObjectiveWeights,
    pub setup: SetupOptions,
    pub planner: PlannerConfig,
    pub limits: MotionLimits,
}

#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub setup: SetupResult,
    pub path: JointPath,
    pub trajectory: JointTrajectory,
    pub setup_pose: NeedlePose,
}

/// Setup optimization, path planning, timing and an independent audit of
/// the result.
pub fn compute_plan(req: &PlanRequest, cancel: Option<&AtomicBool>) -> Result<PlanOutcome, PlanningError> {
    let cancelled = || cancel.is_some_and(|c| c.load(Ordering::Relaxed));
    let setup = optimize_setup_config(&req.ctx, &req.setup_pose, &req.start, &req.weights, &req.setup)?;
    if cancelled() {
        return Err(PlanningError::Cancelled);
    }
    let path = plan_path(&req.ctx, &req.start, &setup.config, &req.planner, cancel)?;
    let trajectory = time_parameterize(&path, &req.limits)?;
    let geo = audit_path(
        &req.ctx,
        &path,
        req.planner.revolute_resolution,
        req.planner.prismatic_resolution,
    );
    if !geo.passed() {
        return Err(PlanningError::AuditFailed(format!("{:?}", geo.violations[0])));
    }
    let timing = audit_trajectory(&trajectory, &req.limits);
    if !timing.passed() {
        return Err(PlanningError::AuditFailed(format!("{:?}", timing.violations[0])));
    }
    Ok(PlanOutcome {
        setup,
        path,
        trajectory,
        setup_pose: req.setup_pose,
    })
}

/// Unreachable or blocked setup poses, as opposed to planner trouble.
pub fn is_infeasible(e: &PlanningError) -> bool {
    matches!(
        e,
        PlanningError::Unreachable { .. } | PlanningError::InfeasibleSetup | PlanningError::InvalidEndpoint { .. }
    )
}
