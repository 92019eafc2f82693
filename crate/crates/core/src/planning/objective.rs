use super::PlanningContext;
use crate::collision::clearance_with_gradient;
use crate::kinematics::{joint_limit_margin_unchecked, JointConfig, JointVector, KinematicsError, DOF};
use serde::{Deserialize, Serialize};

/// Weights of the scalarized setup objective
/// `U = w_m ln(w + eps) + w_c min(clearance, c_cap) + w_j margin`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetupObjectiveWeights {
    pub manipulability: f64,
    /// Per meter of clearance.
    pub clearance: f64,
    pub joint_limits: f64,
    pub log_guard: f64,
    /// Clearance above this contributes nothing more.
    pub clearance_cap: f64,
}

impl Default for SetupObjectiveWeights {
    fn default() -> Self {
        Self {
            manipulability: 1.0,
            clearance: 10.0,
            joint_limits: 1.0,
            log_guard: 1e-9,
            clearance_cap: 0.05,
        }
    }
}

impl SetupObjectiveWeights {
    pub fn validate(&self) -> Result<(), String> {
        let w = [self.manipulability, self.clearance, self.joint_limits, self.clearance_cap];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err("weights must be finite and non-negative".into());
        }
        if !(self.log_guard > 0.0) {
            return Err("log_guard must be positive".into());
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            manipulability: self.manipulability * c,
            clearance: self.clearance * c,
            joint_limits: self.joint_limits * c,
            ..*self
        }
    }

    fn total(&self) -> f64 {
        self.manipulability + self.clearance + self.joint_limits
    }
}

/// Objective evaluator. Internally the three weights are normalized to sum
/// to one so that decisions do not depend on their common scale; `value`
/// reports the unnormalized objective.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    ctx: &'a PlanningContext,
    weights: SetupObjectiveWeights,
    normalized: [f64; 3],
}

impl<'a> Objective<'a> {
    pub fn new(ctx: &'a PlanningContext, weights: SetupObjectiveWeights) -> Self {
        let total = weights.total();
        let normalized = if total > 0.0 {
            [
                weights.manipulability / total,
                weights.clearance / total,
                weights.joint_limits / total,
            ]
        } else {
            [0.0; 3]
        };
        Self {
            ctx,
            weights,
            normalized,
        }
    }

    pub fn weights(&self) -> &SetupObjectiveWeights {
        &self.weights
    }

    fn terms(&self, q: &JointConfig) -> Result<[f64; 3], KinematicsError> {
        let m = &self.ctx.model;
        let w = m.manipulability(q)?;
        let c = self.ctx.clearance(q)?;
        let margin = joint_limit_margin_unchecked(&m.limits, q);
        Ok([
            (w + self.weights.log_guard).ln(),
            c.min(self.weights.clearance_cap),
            margin,
        ])
    }

    /// `U(q)` with the caller's weights.
    pub fn value(&self, q: &JointConfig) -> Result<f64, KinematicsError> {
        let t = self.terms(q)?;
        Ok(self.weights.manipulability * t[0]
            + self.weights.clearance * t[1]
            + self.weights.joint_limits * t[2])
    }

    /// `U(q)` divided by the weight total (zero when all weights are zero).
    pub fn normalized_value(&self, q: &JointConfig) -> Result<f64, KinematicsError> {
        let t = self.terms(q)?;
        Ok(self.normalized[0] * t[0] + self.normalized[1] * t[1] + self.normalized[2] * t[2])
    }

    /// Gradient of [`Objective::normalized_value`].
    pub fn normalized_gradient(&self, q: &JointConfig) -> Result<JointVector, KinematicsError> {
        let m = &self.ctx.model;
        let (w, dlnw) = m.manipulability_with_log_gradient(q)?;
        let mut g = dlnw * (self.normalized[0] * w / (w + self.weights.log_guard));

        if self.normalized[1] > 0.0 {
            let f = m.frames_unchecked(q);
            let (c, dc) =
                clearance_with_gradient(&f, &self.ctx.world, &self.ctx.shape, &self.ctx.collision);
            if c.value < self.weights.clearance_cap {
                g += dc * self.normalized[1];
            }
        }

        if self.normalized[2] > 0.0 {
            // gradient of the active (smallest) joint margin
            let mut active = 0;
            let mut best = f64::INFINITY;
            for j in 0..DOF - 1 {
                let r = m.limits.0[j];
                let wd = r.width();
                let v = 4.0 * (q[j] - r.lo) * (r.hi - q[j]) / (wd * wd);
                if v < best {
                    best = v;
                    active = j;
                }
            }
            let r = m.limits.0[active];
            let wd = r.width();
            g[active] += self.normalized[2] * 4.0 * (r.hi + r.lo - 2.0 * q[active]) / (wd * wd);
        }
        Ok(g)
    }

    /// Gradient of [`Objective::value`].
    pub fn gradient(&self, q: &JointConfig) -> Result<JointVector, KinematicsError> {
        let total = self.weights.total();
        Ok(self.normalized_gradient(q)? * total)
    }
}
