//! Simulated CT confirmation scan.

use crate::kinematics::{perp_basis, NeedlePose, Vec3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanNoise {
    /// Per-axis standard deviation of the tip position (m).
    pub position_sigma: f64,
    /// Standard deviation of each of the two axis tilt components (rad).
    pub axis_sigma: f64,
}

impl Default for ScanNoise {
    fn default() -> Self {
        Self {
            position_sigma: 0.3e-3,
            axis_sigma: 0.3_f64.to_radians(),
        }
    }
}

impl ScanNoise {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.position_sigma >= 0.0 && self.axis_sigma >= 0.0) {
            return Err("scan noise must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub measured: NeedlePose,
    /// Distance from the measured tip to the target (m).
    pub tip_error: f64,
    pub within: bool,
}

/// Measures `truth` with zero-mean Gaussian noise: independent per-axis
/// position noise, and a tilt of the axis by two independent perpendicular
/// components.
pub fn confirmation_scan(truth: &NeedlePose, noise: &ScanNoise, rng: &mut impl Rng) -> NeedlePose {
    let gauss = |s: f64, rng: &mut _| -> f64 {
        if s > 0.0 {
            Normal::new(0.0, s).expect("sigma > 0").sample(rng)
        } else {
            0.0
        }
    };
    let tip = truth.tip + Vec3::new(gauss(noise.position_sigma, rng), gauss(noise.position_sigma, rng), gauss(noise.position_sigma, rng));
    let (e1, e2) = perp_basis(&truth.axis);
    let tilt = e1 * gauss(noise.axis_sigma, rng) + e2 * gauss(noise.axis_sigma, rng);
    let angle = tilt.norm();
    let axis = if angle > 0.0 {
        truth.axis * angle.cos() + tilt / angle * angle.sin()
    } else {
        truth.axis
    };
    NeedlePose::new(tip, axis)
}

pub fn evaluate_scan(measured: NeedlePose, target: &Vec3, threshold: f64) -> ScanResult {
    let tip_error = (measured.tip - target).norm();
    ScanResult {
        measured,
        tip_error,
        within: tip_error <= threshold,
    }
}
