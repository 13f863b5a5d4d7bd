use nalgebra::{Matrix3, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("rotation matrix is not orthonormal with det +1 (drift {drift:.3e})")]
    NotARotation { drift: f64 },
}

/// Rigid transform, world-from-body: `p_world = R * p_body + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseJson", into = "PoseJson")]
pub struct Pose6D {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

/// JSON form: rotation as 9 row-major entries, translation as 3 entries.
#[derive(Serialize, Deserialize)]
struct PoseJson {
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl From<Pose6D> for PoseJson {
    fn from(p: Pose6D) -> Self {
        let r = &p.rotation;
        PoseJson {
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl TryFrom<PoseJson> for Pose6D {
    type Error = PoseError;

    fn try_from(j: PoseJson) -> Result<Self, PoseError> {
        let r = Matrix3::from_row_slice(&j.rotation);
        let t = Vector3::from_column_slice(&j.translation);
        Pose6D::from_parts(r, t)
    }
}

/// Orthonormality drift: max deviation of RᵀR from identity plus det error.
fn rotation_drift(r: &Matrix3<f64>) -> f64 {
    let gram = r.transpose() * r;
    let mut drift: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            drift = drift.max((gram[(i, j)] - target).abs());
        }
    }
    drift.max((r.determinant() - 1.0).abs())
}

/// Gram-Schmidt re-orthonormalization; keeps determinant +1 for inputs that
/// are close to a proper rotation.
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let c0 = r.column(0).normalize();
    let mut c1 = r.column(1).into_owned();
    c1 -= c0 * c0.dot(&c1);
    let c1 = c1.normalize();
    let c2 = c0.cross(&c1);
    Matrix3::from_columns(&[c0, c1, c2])
}

impl Pose6D {
    pub fn identity() -> Self {
        Pose6D {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates orthonormality (det +1) and renormalizes residual drift.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, PoseError> {
        let drift = rotation_drift(&rotation);
        if !drift.is_finite() || drift > 1e-6 {
            return Err(PoseError::NotARotation { drift });
        }
        let rotation = if drift > 1e-12 {
            orthonormalize(&rotation)
        } else {
            rotation
        };
        Ok(Pose6D { rotation, translation })
    }

    /// Caller guarantees `rotation` is orthonormal with det +1.
    pub fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose6D { rotation, translation }
    }

    pub fn from_rotation(rotation: Matrix3<f64>) -> Self {
        Pose6D {
            rotation,
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Pose6D {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self` then `other`: maps body of `other` through `other` into the
    /// frame `self` maps from. `compose(a, b).apply(p) == a.apply(b.apply(p))`.
    pub fn compose(&self, other: &Pose6D) -> Pose6D {
        let rotation = self.rotation * other.rotation;
        let translation = self.rotation * other.translation + self.translation;
        let rotation = if rotation_drift(&rotation) > 1e-12 {
            orthonormalize(&rotation)
        } else {
            rotation
        };
        Pose6D { rotation, translation }
    }

    pub fn invert(&self) -> Pose6D {
        let rt = self.rotation.transpose();
        Pose6D {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Geodesic rotation error to `other`, in radians.
    pub fn rotation_distance(&self, other: &Pose6D) -> f64 {
        so3_log(&(self.rotation.transpose() * other.rotation)).norm()
    }

    pub fn translation_distance(&self, other: &Pose6D) -> f64 {
        (self.translation - other.translation).norm()
    }
}

pub fn so3_hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rodrigues exponential; exact for any angle.
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let omega = so3_hat(w);
    // sin(θ)/θ and (1-cos(θ))/θ² go through Taylor series near zero.
    let (a, b) = if theta < 1e-4 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + omega * a + omega * omega * b
}

/// Rotation logarithm as an axis-angle vector with norm in `[0, π]`.
///
/// Near θ = π the skew part of R degenerates, so the axis is recovered from
/// R + I, anchored on its largest diagonal element.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    // vee(R - Rᵀ) = 2 sin(θ) * axis
    let w = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    // atan2 of (sin θ, cos θ) stays well conditioned at both ends of [0, π];
    // acos alone loses ~8 digits near π.
    let sin = (w.norm() * 0.5).min(1.0);
    let theta = sin.atan2(cos);
    if theta < 1e-10 {
        return w * 0.5;
    }
    if theta < std::f64::consts::PI - 1e-6 {
        // w / (2 sin θ) is the unit axis.
        return w * (theta / w.norm());
    }
    let s = r + Matrix3::identity();
    let one_minus_cos = 1.0 - cos;
    let mut k = 0;
    for i in 1..3 {
        if s[(i, i)] > s[(k, k)] {
            k = i;
        }
    }
    let ak = ((s[(k, k)] - (1.0 + cos)) / one_minus_cos).max(0.0).sqrt();
    let mut axis = Vector3::zeros();
    axis[k] = ak;
    for i in 0..3 {
        if i != k {
            axis[i] = (s[(i, k)] + s[(k, i)]) / (2.0 * one_minus_cos * ak);
        }
    }
    let axis = axis.normalize();
    // sin(θ) ≥ 0 on [0, π], so the skew part fixes the sign when nonzero.
    let axis = if axis.dot(&w) < 0.0 { -axis } else { axis };
    axis * theta
}

/// Pose logarithm: rotation axis-angle stacked over the raw translation.
/// This is the log of the product manifold SO(3) x R³; the translation part
/// is the pose translation itself, not a twisted velocity.
pub fn se3_log(pose: &Pose6D) -> Vector6<f64> {
    let w = so3_log(&pose.rotation);
    Vector6::new(
        w.x,
        w.y,
        w.z,
        pose.translation.x,
        pose.translation.y,
        pose.translation.z,
    )
}

/// Inverse of [`se3_log`].
pub fn se3_exp(xi: &Vector6<f64>) -> Pose6D {
    let w = Vector3::new(xi[0], xi[1], xi[2]);
    Pose6D {
        rotation: so3_exp(&w),
        translation: Vector3::new(xi[3], xi[4], xi[5]),
    }
}

/// Geodesic interpolation: rotation slerped along `log(RaᵀRb)`, translation
/// linear. `alpha = 0` returns `a`, `alpha = 1` returns `b`.
pub fn interpolate_pose(a: &Pose6D, b: &Pose6D, alpha: f64) -> Pose6D {
    let w = so3_log(&(a.rotation.transpose() * b.rotation));
    let rotation = a.rotation * so3_exp(&(w * alpha));
    let translation = a.translation * (1.0 - alpha) + b.translation * alpha;
    Pose6D {
        rotation: if rotation_drift(&rotation) > 1e-12 {
            orthonormalize(&rotation)
        } else {
            rotation
        },
        translation,
    }
}
