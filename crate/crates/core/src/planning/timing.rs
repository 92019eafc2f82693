use super::{JointPath, PlanningError};
use crate::kinematics::{JointConfig, JointKind, DOF, JOINT_KINDS};
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const SAMPLE_PERIOD_NS: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionLimits {
    pub v_max: [f64; DOF],
    pub a_max: [f64; DOF],
}

impl Default for MotionLimits {
    fn default() -> Self {
        let pick = |rev: f64, pri: f64| {
            JOINT_KINDS.map(|k| match k {
                JointKind::Revolute => rev,
                JointKind::Prismatic => pri,
            })
        };
        Self {
            v_max: pick(0.5, 0.05),
            a_max: pick(2.0, 0.2),
        }
    }
}

impl MotionLimits {
    pub fn validate(&self) -> Result<(), PlanningError> {
        for j in 0..DOF {
            if !(self.v_max[j] > 0.0 && self.v_max[j].is_finite()) {
                return Err(PlanningError::InvalidLimits(format!("v_max of joint {} must be positive", j + 1)));
            }
            if !(self.a_max[j] > 0.0 && self.a_max[j].is_finite()) {
                return Err(PlanningError::InvalidLimits(format!("a_max of joint {} must be positive", j + 1)));
            }
        }
        Ok(())
    }
}

/// Rest-to-rest trapezoid (or triangle) duration covering `distance` with
/// peak speed `v` and acceleration `a`.
pub fn trapezoid_duration(distance: f64, v: f64, a: f64) -> f64 {
    let d = distance.abs();
    if d == 0.0 {
        return 0.0;
    }
    if v * v / a >= d {
        2.0 * (d / a).sqrt()
    } else {
        d / v + v / a
    }
}

/// Normalized segment profile: path parameter s in [0,1] over `duration`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Profile {
    v: f64,
    a: f64,
    duration: f64,
}

impl Profile {
    fn new(from: &JointConfig, to: &JointConfig, lim: &MotionLimits) -> Self {
        let mut v = f64::INFINITY;
        let mut a = f64::INFINITY;
        for j in 0..DOF {
            let d = (to[j] - from[j]).abs();
            if d > 0.0 {
                v = v.min(lim.v_max[j] / d);
                a = a.min(lim.a_max[j] / d);
            }
        }
        if !v.is_finite() {
            return Self { v: 0.0, a: 0.0, duration: 0.0 };
        }
        let v = v.min((a).sqrt());
        Self {
            v,
            a,
            duration: trapezoid_duration(1.0, v, a),
        }
    }

    /// (s, ds/dt) at time t into the segment.
    fn eval(&self, t: f64) -> (f64, f64) {
        if self.duration == 0.0 || t >= self.duration {
            return (1.0, 0.0);
        }
        let t = t.max(0.0);
        let ta = self.v / self.a;
        if t < ta {
            (0.5 * self.a * t * t, self.a * t)
        } else if t <= self.duration - ta {
            (0.5 * self.a * ta * ta + self.v * (t - ta), self.v)
        } else {
            let r = self.duration - t;
            (1.0 - 0.5 * self.a * r * r, self.a * r)
        }
    }
}

/// A path with a rest-to-rest trapezoidal timing law on every segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTrajectory {
    pub waypoints: Vec<JointConfig>,
    /// Duration of each segment in seconds.
    pub segment_durations: Vec<f64>,
    profiles: Vec<Profile>,
}

impl JointTrajectory {
    pub fn duration(&self) -> f64 {
        self.segment_durations.iter().sum()
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let mut t0 = 0.0;
        for (i, d) in self.segment_durations.iter().enumerate() {
            if t < t0 + d {
                return (i, t - t0);
            }
            t0 += d;
        }
        (self.profiles.len(), 0.0)
    }

    pub fn position(&self, t: f64) -> JointConfig {
        let (i, tl) = self.locate(t);
        if i >= self.profiles.len() {
            return *self.waypoints.last().expect("non-empty");
        }
        let (s, _) = self.profiles[i].eval(tl);
        self.waypoints[i].lerp(&self.waypoints[i + 1], s)
    }

    pub fn velocity(&self, t: f64) -> [f64; DOF] {
        let (i, tl) = self.locate(t);
        if i >= self.profiles.len() {
            return [0.0; DOF];
        }
        let (_, sd) = self.profiles[i].eval(tl);
        let (a, b) = (&self.waypoints[i], &self.waypoints[i + 1]);
        std::array::from_fn(|j| (b[j] - a[j]) * sd)
    }

    /// Samples at 1 kHz from t = 0 up to the first tick at or after the end.
    pub fn samples(&self) -> Vec<(u64, JointConfig)> {
        let total_ns = (self.duration() * 1e9).ceil() as u64;
        let n = total_ns.div_ceil(SAMPLE_PERIOD_NS);
        (0..=n)
            .map(|k| {
                let t_ns = k * SAMPLE_PERIOD_NS;
                (t_ns, self.position(t_ns as f64 * 1e-9))
            })
            .collect()
    }

    /// CSV with header `t,q1..q8`, time in seconds.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        write!(out, "t")?;
        for j in 1..=DOF {
            write!(out, ",q{j}")?;
        }
        writeln!(out)?;
        for (t_ns, q) in self.samples() {
            write!(out, "{:.3}", t_ns as f64 * 1e-9)?;
            for v in q.0 {
                write!(out, ",{v:.9}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Assigns a trapezoidal timing law to every segment of `path`. All joints
/// of a segment move in lockstep along the straight joint-space line.
pub fn time_parameterize(path: &JointPath, limits: &MotionLimits) -> Result<JointTrajectory, PlanningError> {
    limits.validate()?;
    let profiles: Vec<Profile> = path
        .waypoints
        .windows(2)
        .map(|w| Profile::new(&w[0], &w[1], limits))
        .collect();
    Ok(JointTrajectory {
        waypoints: path.waypoints.clone(),
        segment_durations: profiles.iter().map(|p| p.duration).collect(),
        profiles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planning::audit_trajectory;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn path(w: Vec<JointConfig>) -> JointPath {
        JointPath { waypoints: w }
    }

    #[test]
    fn single_waypoint_has_zero_duration() {
        let t = time_parameterize(&path(vec![JointConfig::HOME]), &MotionLimits::default()).unwrap();
        assert_eq!(t.duration(), 0.0);
        assert_eq!(t.samples(), vec![(0, JointConfig::HOME)]);
    }

    #[test]
    fn zero_velocity_limit_is_rejected() {
        let mut lim = MotionLimits::default();
        lim.v_max[4] = 0.0;
        assert!(matches!(
            time_parameterize(&path(vec![JointConfig::HOME]), &lim),
            Err(PlanningError::InvalidLimits(_))
        ));
    }

    #[test]
    fn closed_form_durations() {
        let lim = MotionLimits::default();
        // cruise phase: 1 rad at 0.5 rad/s, 2 rad/s^2 -> 1/0.5 + 0.5/2
        let mut b = JointConfig::HOME;
        b[4] = 1.0;
        let t = time_parameterize(&path(vec![JointConfig::HOME, b]), &lim).unwrap();
        assert!((t.duration() - 2.25).abs() < 1e-12);
        // triangle: 0.05 rad never reaches cruise -> 2 sqrt(0.05/2)
        b[4] = 0.05;
        let t = time_parameterize(&path(vec![JointConfig::HOME, b]), &lim).unwrap();
        assert!((t.duration() - 2.0 * (0.025f64).sqrt()).abs() < 1e-12);
        // the slowest joint dominates
        let mut c = JointConfig::HOME;
        c[0] = 0.1;
        c[4] = 0.1;
        let t = time_parameterize(&path(vec![JointConfig::HOME, c]), &lim).unwrap();
        assert!((t.duration() - (0.1 / 0.05 + 0.05 / 0.2)).abs() < 1e-12);
    }

    #[test]
    fn endpoints_and_waypoints_are_hit() {
        let mut b = JointConfig::HOME;
        b[3] = 0.4;
        let mut c = b;
        c[2] = -0.05;
        let t = time_parameterize(&path(vec![JointConfig::HOME, b, c]), &MotionLimits::default()).unwrap();
        assert_eq!(t.position(0.0), JointConfig::HOME);
        assert!(t.position(t.segment_durations[0]).max_abs_diff(&b) < 1e-12);
        assert_eq!(t.samples().last().unwrap().1, c);
    }

    #[test]
    fn random_paths_respect_limits() {
        let lim = MotionLimits::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(2..6);
            let w: Vec<JointConfig> = (0..n)
                .map(|_| JointConfig(std::array::from_fn(|j| rng.random_range(-0.2..0.2) * if j < 3 { 0.3 } else { 1.0 })))
                .map(|mut q| {
                    q[7] = q[7].abs();
                    q
                })
                .collect();
            let t = time_parameterize(&path(w), &lim).unwrap();
            let rep = audit_trajectory(&t, &lim);
            assert!(rep.passed(), "{:?}", rep.violations.first());
        }
    }

    #[test]
    fn csv_has_header_and_millisecond_rows() {
        let mut b = JointConfig::HOME;
        b[4] = 0.01;
        let t = time_parameterize(&path(vec![JointConfig::HOME, b]), &MotionLimits::default()).unwrap();
        let mut buf = vec![];
        t.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next().unwrap(), "t,q1,q2,q3,q4,q5,q6,q7,q8");
        assert!(lines.next().unwrap().starts_with("0.000,"));
        assert!(lines.next().unwrap().starts_with("0.001,"));
    }
}
