//! Rotation arithmetic and the angular error metrics every evaluator builds on.
//!
//! Angles are carried in radians internally and reported in degrees at the
//! metric boundary. Every `acos` argument is clamped to its valid domain.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Per-entry tolerance used when validating orthonormality and determinant.
pub const ROTATION_TOL: f64 = 1e-9;
/// Quaternion norms further than this from one are rejected by strict readers.
pub const QUAT_NORM_TOL: f64 = 1e-6;
/// Vectors shorter than this count as zero for direction-based metrics.
pub const MIN_TRANSLATION_NORM: f64 = 1e-12;
/// Distance in degrees from ±90° pitch at which an Euler split is flagged.
pub const GIMBAL_TOL_DEG: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum So3Error {
    #[error("degenerate quaternion (norm {0:e})")]
    DegenerateQuaternion(f64),
    #[error("matrix is not a rotation: {0}")]
    NotARotation(String),
    #[error("degenerate translation (norm {0:e})")]
    DegenerateTranslation(f64),
    #[error("degenerate scale: predicted translation has norm {0:e}")]
    DegenerateScale(f64),
}

/// A proper rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationSO3(Matrix3<f64>);

impl RotationSO3 {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Validates orthonormality and `det = +1` to [`ROTATION_TOL`].
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, So3Error> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(So3Error::NotARotation("non-finite entry".into()));
        }
        let gram = m.transpose() * m - Matrix3::identity();
        let worst = gram.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if worst > ROTATION_TOL {
            return Err(So3Error::NotARotation(format!(
                "max |MᵀM − I| entry {worst:e}"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(So3Error::NotARotation(format!("determinant {det}")));
        }
        Ok(Self(m))
    }

    /// Wraps a matrix known to be a rotation (e.g. a product of rotations).
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    /// Row-major 3×3 entries.
    pub fn from_row_slice(rows: &[f64; 9]) -> Result<Self, So3Error> {
        Self::from_matrix(Matrix3::from_row_slice(rows))
    }

    pub fn to_row_array(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::identity();
        }
        Self::exp(&(axis / n * angle))
    }

    /// Exponential map from the tangent space (Rodrigues formula).
    pub fn exp(omega: &Vector3<f64>) -> Self {
        let theta = omega.norm();
        let k = hat(omega);
        if theta < 1e-8 {
            // second-order Taylor expansion
            return Self(Matrix3::identity() + k + 0.5 * k * k);
        }
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / (theta * theta);
        Self(Matrix3::identity() + a * k + b * k * k)
    }

    /// Axis-angle vector (rotation vector) of this rotation.
    pub fn log(&self) -> Vector3<f64> {
        let q = matrix_to_quat(self);
        let v = Vector3::new(q.x, q.y, q.z);
        let s = v.norm();
        if s < 1e-300 {
            return Vector3::zeros();
        }
        let angle = 2.0 * s.atan2(q.w);
        v / s * angle
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn angle(&self) -> f64 {
        acos_clamped(0.5 * (self.0.trace() - 1.0))
    }

    pub fn rot_x_deg(deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        Self(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn rot_y_deg(deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        Self(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn rot_z_deg(deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        Self(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }
}

impl Default for RotationSO3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Mul for RotationSO3 {
    type Output = RotationSO3;
    fn mul(self, rhs: RotationSO3) -> RotationSO3 {
        RotationSO3(self.0 * rhs.0)
    }
}

impl Mul<&RotationSO3> for &RotationSO3 {
    type Output = RotationSO3;
    fn mul(self, rhs: &RotationSO3) -> RotationSO3 {
        RotationSO3(self.0 * rhs.0)
    }
}

/// Scalar-first quaternion, matching the on-disk COLMAP layout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Result<Self, So3Error> {
        let n = self.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(So3Error::DegenerateQuaternion(n));
        }
        Ok(Self::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Sign-canonical form with `w >= 0`.
    pub fn canonical(&self) -> Self {
        if self.w < 0.0 {
            Self::new(-self.w, -self.x, -self.y, -self.z)
        } else {
            *self
        }
    }

    pub fn to_rotation(&self) -> Result<RotationSO3, So3Error> {
        quat_to_matrix(self)
    }
}

/// Translation vector in model units (meters only after metric scaling).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Translation3(pub Vector3<f64>);

impl Translation3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self(Vector3::new(x, y, z))
    }

    pub fn zeros() -> Self {
        Self(Vector3::zeros())
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn vector(&self) -> &Vector3<f64> {
        &self.0
    }
}

impl From<[f64; 3]> for Translation3 {
    fn from(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl From<Translation3> for [f64; 3] {
    fn from(t: Translation3) -> Self {
        [t.0.x, t.0.y, t.0.z]
    }
}

impl From<Vector3<f64>> for Translation3 {
    fn from(v: Vector3<f64>) -> Self {
        Self(v)
    }
}

/// Skew-symmetric matrix `ω̂` with `ω̂ v = ω × v`.
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Inverse of [`hat`] applied to the skew part of `m`, i.e. `vee((m − mᵀ)/2)`.
pub fn vee_skew(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

pub(crate) fn acos_clamped(x: f64) -> f64 {
    x.clamp(-1.0, 1.0).acos()
}

pub fn quat_to_matrix(q: &UnitQuaternion) -> Result<RotationSO3, So3Error> {
    let q = q.normalized()?;
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Ok(RotationSO3(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )))
}

/// Shepperd's method; output is canonical (`w >= 0`).
pub fn matrix_to_quat(r: &RotationSO3) -> UnitQuaternion {
    let m = &r.0;
    let tr = m.trace();
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        UnitQuaternion::new(
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        )
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        UnitQuaternion::new(
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        )
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        UnitQuaternion::new(
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        )
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        UnitQuaternion::new(
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        )
    };
    let n = q.norm();
    UnitQuaternion::new(q.w / n, q.x / n, q.y / n, q.z / n).canonical()
}

/// Geodesic distance on SO(3) in radians: `acos((tr(aᵀb) − 1) / 2)`.
pub fn geodesic_rad(a: &RotationSO3, b: &RotationSO3) -> f64 {
    let tr = (a.0.transpose() * b.0).trace();
    acos_clamped(0.5 * (tr - 1.0))
}

pub fn geodesic_deg(a: &RotationSO3, b: &RotationSO3) -> f64 {
    geodesic_rad(a, b).to_degrees()
}

/// `R_rel = R₂ R₁ᵀ`, mapping camera-1 coordinates into camera-2 coordinates
/// for world→camera poses.
pub fn relative_rotation(r1: &RotationSO3, r2: &RotationSO3) -> RotationSO3 {
    RotationSO3(r2.0 * r1.0.transpose())
}

/// Euler split used to extract relative yaw and pitch.
///
/// Camera frame: `+x` right, `+y` up, `+z` forward. Yaw turns about `y`,
/// pitch about `x`, roll about `z`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EulerConvention {
    /// `R = Ry(yaw) · Rx(pitch) · Rz(roll)` (intrinsic Y-X-Z).
    #[default]
    Yxz,
    /// `R = Rx(pitch) · Ry(yaw) · Rz(roll)` (intrinsic X-Y-Z).
    Xyz,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct YawPitch {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    /// Set when the middle angle sits at ±90°; roll was forced to zero.
    pub gimbal_lock: bool,
}

fn wrap_half_open(deg: f64) -> f64 {
    // (-180, 180]
    if deg <= -180.0 {
        deg + 360.0
    } else if deg > 180.0 {
        deg - 360.0
    } else {
        deg
    }
}

pub fn yaw_pitch_deg(rel: &RotationSO3) -> YawPitch {
    yaw_pitch_deg_with(rel, EulerConvention::Yxz)
}

pub fn yaw_pitch_deg_with(rel: &RotationSO3, convention: EulerConvention) -> YawPitch {
    let m = &rel.0;
    match convention {
        EulerConvention::Yxz => {
            let sin_pitch = (-m[(1, 2)]).clamp(-1.0, 1.0);
            let pitch = sin_pitch.asin();
            let locked = (pitch.to_degrees().abs() - 90.0).abs() < GIMBAL_TOL_DEG;
            let yaw = if locked {
                (-m[(2, 0)]).atan2(m[(0, 0)])
            } else {
                m[(0, 2)].atan2(m[(2, 2)])
            };
            YawPitch {
                yaw_deg: wrap_half_open(yaw.to_degrees()),
                pitch_deg: wrap_half_open(pitch.to_degrees()),
                gimbal_lock: locked,
            }
        }
        EulerConvention::Xyz => {
            let sin_yaw = m[(0, 2)].clamp(-1.0, 1.0);
            let yaw = sin_yaw.asin();
            let locked = (yaw.to_degrees().abs() - 90.0).abs() < GIMBAL_TOL_DEG;
            let pitch = if locked {
                m[(2, 1)].atan2(m[(1, 1)])
            } else {
                (-m[(1, 2)]).atan2(m[(2, 2)])
            };
            YawPitch {
                yaw_deg: wrap_half_open(yaw.to_degrees()),
                pitch_deg: wrap_half_open(pitch.to_degrees()),
                gimbal_lock: locked,
            }
        }
    }
}

/// Angle between translation directions, folded so antiparallel reads as 0.
pub fn translation_angle_deg(t: &Translation3, t_star: &Translation3) -> Result<f64, So3Error> {
    let (n1, n2) = (t.norm(), t_star.norm());
    if !(n1 >= MIN_TRANSLATION_NORM) {
        return Err(So3Error::DegenerateTranslation(n1));
    }
    if !(n2 >= MIN_TRANSLATION_NORM) {
        return Err(So3Error::DegenerateTranslation(n2));
    }
    let c = (t.0.dot(&t_star.0).abs() / (n1 * n2)).clamp(0.0, 1.0);
    Ok(c.acos().to_degrees())
}

/// `‖t_gt‖ / ‖t_pred‖`.
pub fn translation_scale(t_pred: &Translation3, t_gt: &Translation3) -> Result<f64, So3Error> {
    let np = t_pred.norm();
    if !(np >= MIN_TRANSLATION_NORM) {
        return Err(So3Error::DegenerateScale(np));
    }
    Ok(t_gt.norm() / np)
}

/// Serialized as the nine row-major entries; validated on the way in.
impl Serialize for RotationSO3 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_row_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for RotationSO3 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = <[f64; 9]>::deserialize(d)?;
        RotationSO3::from_row_slice(&rows).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for RotationSO3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
