//! Robot-to-scanner calibration from paired fiducial points.
//!
//! The transform maps robot-frame points into the scanner frame:
//! `s = R p + t`.

use crate::kinematics::{NeedlePose, Vec3};
use nalgebra::{Matrix3, Rotation3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegistrationError {
    #[error("need at least 3 fiducial pairs, got {0}")]
    InsufficientPoints(usize),
    #[error("robot and scanner lists differ in length ({robot} vs {scanner})")]
    LengthMismatch { robot: usize, scanner: usize },
    #[error("fiducials are collinear or coincident")]
    DegenerateFiducials,
    #[error("fiducial coordinates must be finite")]
    NonFinite,
    #[error("matrix is not a proper rotation")]
    NotARotation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a transform, rejecting matrices that are not proper rotations.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, RegistrationError> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if ortho > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(RegistrationError::NotARotation);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn apply_pose(&self, pose: &NeedlePose) -> NeedlePose {
        NeedlePose {
            tip: self.apply(&pose.tip),
            axis: self.apply_vector(&pose.axis),
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Rotation angle of `self⁻¹ ∘ other` in radians.
    pub fn rotation_angle_to(&self, other: &RigidTransform) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        Rotation3::from_matrix_unchecked(rel).angle()
    }
}

/// Wire form `{ "R": [9 numbers, row-major], "t": [3 numbers] }`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformJson {
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl From<&RigidTransform> for TransformJson {
    fn from(t: &RigidTransform) -> Self {
        let m = &t.rotation;
        Self {
            r: [
                m[(0, 0)],
                m[(0, 1)],
                m[(0, 2)],
                m[(1, 0)],
                m[(1, 1)],
                m[(1, 2)],
                m[(2, 0)],
                m[(2, 1)],
                m[(2, 2)],
            ],
            t: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl TryFrom<&TransformJson> for RigidTransform {
    type Error = RegistrationError;
    fn try_from(j: &TransformJson) -> Result<Self, RegistrationError> {
        RigidTransform::new(
            Matrix3::from_row_slice(&j.r),
            Vec3::new(j.t[0], j.t[1], j.t[2]),
        )
    }
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TransformJson::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let j = TransformJson::deserialize(d)?;
        RigidTransform::try_from(&j).map_err(serde::de::Error::custom)
    }
}

/// Paired fiducial positions in the two frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiducialSet {
    pub robot: Vec<[f64; 3]>,
    pub scanner: Vec<[f64; 3]>,
}

impl FiducialSet {
    pub fn new(robot: Vec<Vec3>, scanner: Vec<Vec3>) -> Self {
        let conv = |v: Vec<Vec3>| v.into_iter().map(|p| [p.x, p.y, p.z]).collect();
        Self {
            robot: conv(robot),
            scanner: conv(scanner),
        }
    }

    pub fn len(&self) -> usize {
        self.robot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.robot.is_empty()
    }

    fn points(list: &[[f64; 3]]) -> Vec<Vec3> {
        list.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect()
    }

    pub fn validate(&self) -> Result<(), RegistrationError> {
        if self.robot.len() != self.scanner.len() {
            return Err(RegistrationError::LengthMismatch {
                robot: self.robot.len(),
                scanner: self.scanner.len(),
            });
        }
        if self.robot.len() < 3 {
            return Err(RegistrationError::InsufficientPoints(self.robot.len()));
        }
        if self
            .robot
            .iter()
            .chain(self.scanner.iter())
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(RegistrationError::NonFinite);
        }
        if is_degenerate(&Self::points(&self.robot)) {
            return Err(RegistrationError::DegenerateFiducials);
        }
        Ok(())
    }
}

fn centroid(pts: &[Vec3]) -> Vec3 {
    pts.iter().sum::<Vec3>() / pts.len() as f64
}

/// True when the points span less than a plane (collinear or coincident).
fn is_degenerate(pts: &[Vec3]) -> bool {
    let c = centroid(pts);
    let mut scatter = Matrix3::zeros();
    for p in pts {
        let d = p - c;
        scatter += d * d.transpose();
    }
    let sv = scatter.symmetric_eigenvalues();
    let mut ev: Vec<f64> = sv.iter().map(|v| v.abs()).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev[0] <= f64::MIN_POSITIVE || ev[1] <= 1e-12 * ev[0]
}

/// Result of a rigid fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Registration {
    pub transform: RigidTransform,
    /// Fiducial registration error: RMS residual in meters.
    pub fre: f64,
}

/// Least-squares rigid fit of scanner points to robot points using the
/// cross-covariance SVD, with the determinant correction that keeps the
/// result a proper rotation for mirrored inputs.
pub fn register(fid: &FiducialSet) -> Result<Registration, RegistrationError> {
    fid.validate()?;
    let robot = FiducialSet::points(&fid.robot);
    let scanner = FiducialSet::points(&fid.scanner);
    let cr = centroid(&robot);
    let cs = centroid(&scanner);

    let mut h = Matrix3::zeros();
    for (p, s) in robot.iter().zip(scanner.iter()) {
        h += (p - cr) * (s - cs).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    let rotation = v * correction * u.transpose();
    let translation = cs - rotation * cr;
    let transform = RigidTransform {
        rotation,
        translation,
    };

    let sq: f64 = robot
        .iter()
        .zip(scanner.iter())
        .map(|(p, s)| (transform.apply(p) - s).norm_squared())
        .sum();
    Ok(Registration {
        transform,
        fre: (sq / robot.len() as f64).sqrt(),
    })
}
