use crate::kinematics::{JointConfig, JointLimits, DOF};
use rand::Rng;

/// Uniform sample inside the joint limits; insertion depth drawn from [0, 0.2].
pub fn random_config(rng: &mut impl Rng, limits: &JointLimits) -> JointConfig {
    let mut q = [0.0; DOF];
    for (j, v) in q.iter_mut().enumerate() {
        let r = limits.0[j];
        let hi = if r.hi.is_finite() { r.hi } else { 0.2 };
        *v = rng.random_range(r.lo..=hi);
    }
    JointConfig(q)
}
