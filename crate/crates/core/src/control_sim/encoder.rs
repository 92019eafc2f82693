use crate::kinematics::JointKind;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

/// Absolute encoder with floor quantization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderModel {
    /// Counts per revolution (revolute) or per meter (prismatic).
    pub counts: f64,
    pub kind: JointKind,
}

impl EncoderModel {
    pub fn default_for(kind: JointKind) -> Self {
        Self {
            counts: match kind {
                JointKind::Revolute => 16384.0,
                JointKind::Prismatic => 1e6,
            },
            kind,
        }
    }

    /// Position change per count.
    pub fn resolution(&self) -> f64 {
        match self.kind {
            JointKind::Revolute => TAU / self.counts,
            JointKind::Prismatic => 1.0 / self.counts,
        }
    }

    pub fn read(&self, position: f64) -> i64 {
        (position / self.resolution()).floor() as i64
    }

    pub fn to_position(&self, counts: i64) -> f64 {
        counts as f64 * self.resolution()
    }

    pub fn quantize(&self, position: f64) -> f64 {
        self.to_position(self.read(position))
    }
}
