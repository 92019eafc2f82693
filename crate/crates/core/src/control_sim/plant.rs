use crate::kinematics::JointKind;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantParams {
    /// kg m^2 for revolute joints, kg for prismatic ones.
    pub inertia: f64,
    pub friction: f64,
    pub effort_limit: f64,
}

impl PlantParams {
    pub fn default_for(kind: JointKind) -> Self {
        match kind {
            JointKind::Revolute => Self {
                inertia: 0.01,
                friction: 0.1,
                effort_limit: 5.0,
            },
            JointKind::Prismatic => Self {
                inertia: 5.0,
                friction: 0.1,
                effort_limit: 200.0,
            },
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.inertia > 0.0 && self.friction >= 0.0 && self.effort_limit > 0.0) {
            return Err("inertia and effort_limit must be positive, friction non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub position: f64,
    pub velocity: f64,
}

/// Semi-implicit Euler: velocity first, then position with the new velocity.
/// Returns the effort actually applied after clamping.
pub fn plant_step(p: &PlantParams, s: &mut PlantState, effort: f64, dt: f64) -> f64 {
    let u = effort.clamp(-p.effort_limit, p.effort_limit);
    s.velocity += dt * (u - p.friction * s.velocity) / p.inertia;
    s.position += dt * s.velocity;
    u
}
