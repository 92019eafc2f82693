//! Redundancy resolution and joint-space planning.
//!
//! * [`solve_pose_ik`]: damped least-squares solve for a needle pose.
//! * [`optimize_setup_config`]: multi-start search for the pose-preserving
//!   configuration with the best manipulability / clearance / joint-limit
//!   trade-off.
//! * [`plan_path`]: bidirectional sampling-tree planner with shortcutting.
//! * [`time_parameterize`]: trapezoidal timing sampled at 1 kHz.
//! * [`resolved_rate_step`]: one teleoperation step with nullspace ascent.
//! * [`audit_path`] / [`audit_trajectory`]: independent dense validity checks.

mod audit;
mod ik;
mod objective;
mod rrt;
mod setup;
mod teleop;
mod timing;

pub use audit::{audit_path, audit_trajectory, AuditReport, AuditViolation};
pub use ik::{pose_error, solve_pose_ik, IkOptions, IkSolution};
pub use objective::{Objective, SetupObjectiveWeights};
pub use rrt::{plan_path, JointPath, PlannerConfig};
pub use setup::{optimize_setup_config, setup_seeds, SetupOptions, SetupResult};
pub use teleop::{resolved_rate_step, TeleopOptions};
pub use timing::{time_parameterize, trapezoid_duration, JointTrajectory, MotionLimits};

use crate::collision::{
    clearance_from_frames, CollisionOptions, CollisionWorld, RobotShape,
};
use crate::kinematics::{JointConfig, KinematicsError, RobotModel};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanningError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("pose unreachable (best residual {position:.3e} m, {angle:.3e} rad)")]
    Unreachable { position: f64, angle: f64 },
    #[error("no collision-free configuration satisfies the setup pose")]
    InfeasibleSetup,
    #[error("{which} configuration is in collision or outside limits")]
    InvalidEndpoint { which: &'static str },
    #[error("planner gave up after {samples} samples")]
    Timeout { samples: usize },
    #[error("planning cancelled")]
    Cancelled,
    #[error("invalid motion limits: {0}")]
    InvalidLimits(String),
    #[error("plan failed its audit: {0}")]
    AuditFailed(String),
}

/// Everything the planners need to evaluate a configuration.
#[derive(Debug, Clone)]
pub struct PlanningContext {
    pub model: RobotModel,
    pub world: CollisionWorld,
    pub shape: RobotShape,
    pub collision: CollisionOptions,
}

impl PlanningContext {
    pub fn new(model: RobotModel, world: CollisionWorld, shape: RobotShape) -> Self {
        Self {
            model,
            world,
            shape,
            collision: CollisionOptions::default(),
        }
    }

    pub fn clearance(&self, q: &JointConfig) -> Result<f64, KinematicsError> {
        let f = self.model.frames(q)?;
        Ok(clearance_from_frames(&f, &self.world, &self.shape, &self.collision).value)
    }

    /// Within limits and not penetrating anything.
    pub fn is_free(&self, q: &JointConfig) -> bool {
        matches!(self.clearance(q), Ok(c) if c >= 0.0)
    }
}
