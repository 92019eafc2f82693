use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Bound on the integral term's contribution (effort units).
    pub integral_clamp: f64,
    pub output_clamp: f64,
    /// Time constant of the low-pass on the measured rate (s); 0 disables.
    #[serde(default)]
    pub derivative_filter: f64,
}

impl PidGains {
    pub fn validate(&self) -> Result<(), String> {
        if [self.kp, self.ki, self.kd, self.derivative_filter].iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err("gains must be finite and non-negative".into());
        }
        if !(self.integral_clamp > 0.0 && self.output_clamp > 0.0) {
            return Err("clamps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PidState {
    /// Integral contribution `ki * integral(e)`, kept within the clamp.
    pub integral: f64,
    pub prev_measured: Option<f64>,
    pub rate: f64,
}

impl PidState {
    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// One controller update. The derivative acts on the measurement so a
/// setpoint step causes no kick; the integrator stops while the output is
/// saturated in the direction the error would push it further.
pub fn pid_step(g: &PidGains, s: &mut PidState, setpoint: f64, measured: f64, dt: f64) -> f64 {
    debug_assert!(dt > 0.0);
    let e = setpoint - measured;
    let raw_rate = s.prev_measured.map_or(0.0, |p| (measured - p) / dt);
    s.prev_measured = Some(measured);
    s.rate = if g.derivative_filter > 0.0 {
        let a = dt / (g.derivative_filter + dt);
        s.rate + a * (raw_rate - s.rate)
    } else {
        raw_rate
    };
    let unsat = g.kp * e + s.integral - g.kd * s.rate;
    let saturated_same_way = (unsat > g.output_clamp && e > 0.0) || (unsat < -g.output_clamp && e < 0.0);
    if !saturated_same_way {
        s.integral = (s.integral + g.ki * e * dt).clamp(-g.integral_clamp, g.integral_clamp);
    }
    (g.kp * e + s.integral - g.kd * s.rate).clamp(-g.output_clamp, g.output_clamp)
}
