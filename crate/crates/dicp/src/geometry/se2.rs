//! Planar rigid transforms with exp/log maps.
//!
//! Twists are ordered translation-first: `(rho_x, rho_y, theta)`. The log
//! map rejects rotations within `PI_TOLERANCE` of the +/-pi cut locus
//! instead of picking a branch.

use nalgebra::{Matrix2, Rotation2, Vector2, Vector3};

use crate::error::{Error, Result};

/// Angle magnitude below which closed-form Jacobian coefficients switch to
/// their series expansions. The series are exact to machine precision here,
/// while the closed forms lose digits to cancellation in `1 - cos(theta)`.
pub(crate) const TAYLOR_THRESHOLD_2D: f64 = 1e-4;

/// Half-width of the rejected band around +/-pi in the log map.
pub(crate) const PI_TOLERANCE: f64 = 1e-9;

/// Rigid transform on the plane: rotation followed by translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Se2 {
    rot: Rotation2<f64>,
    trans: Vector2<f64>,
}

/// Coefficients of the planar left Jacobian V = [[a, -b], [b, a]] with
/// a = sin(t)/t and b = (1 - cos(t))/t.
fn jacobian_coeffs(theta: f64) -> (f64, f64) {
    if theta.abs() < TAYLOR_THRESHOLD_2D {
        let t2 = theta * theta;
        let a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
        let b = theta * (0.5 - t2 / 24.0 + t2 * t2 / 720.0);
        (a, b)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta)
    }
}

impl Se2 {
    pub fn identity() -> Self {
        Se2 {
            rot: Rotation2::identity(),
            trans: Vector2::zeros(),
        }
    }

    pub fn new(angle: f64, tx: f64, ty: f64) -> Self {
        Se2 {
            rot: Rotation2::new(angle),
            trans: Vector2::new(tx, ty),
        }
    }

    /// Builds a transform from a raw rotation matrix, validating
    /// orthonormality and determinant within 1e-9.
    pub fn from_matrix(rotation: &Matrix2<f64>, translation: Vector2<f64>) -> Result<Self> {
        validate_rotation_2d(rotation)?;
        Ok(Se2 {
            rot: Rotation2::from_matrix_unchecked(*rotation),
            trans: translation,
        })
    }

    /// Exponential map of the twist `(rho_x, rho_y, theta)`.
    pub fn exp(xi: &Vector3<f64>) -> Self {
        let theta = xi[2];
        let (a, b) = jacobian_coeffs(theta);
        Se2 {
            rot: Rotation2::new(theta),
            trans: Vector2::new(a * xi[0] - b * xi[1], b * xi[0] + a * xi[1]),
        }
    }

    /// Log map back to a twist. Errors when the rotation angle lies within
    /// `PI_TOLERANCE` of +/-pi, where the map is not continuous.
    pub fn log(&self) -> Result<Vector3<f64>> {
        let theta = self.rot.angle();
        if theta.abs() >= std::f64::consts::PI - PI_TOLERANCE {
            return Err(Error::LogSingularity { angle: theta });
        }
        let (a, b) = jacobian_coeffs(theta);
        let det = a * a + b * b;
        let x = self.trans[0];
        let y = self.trans[1];
        Ok(Vector3::new(
            (a * x + b * y) / det,
            (-b * x + a * y) / det,
            theta,
        ))
    }

    pub fn compose(&self, other: &Se2) -> Se2 {
        Se2 {
            rot: self.rot * other.rot,
            trans: self.rot * other.trans + self.trans,
        }
    }

    pub fn inverse(&self) -> Se2 {
        let inv = self.rot.inverse();
        Se2 {
            rot: inv,
            trans: -(inv * self.trans),
        }
    }

    pub fn apply(&self, p: &Vector2<f64>) -> Vector2<f64> {
        self.rot * p + self.trans
    }

    /// Rotates a direction vector without translating it.
    pub fn rotate(&self, v: &Vector2<f64>) -> Vector2<f64> {
        self.rot * v
    }

    pub fn angle(&self) -> f64 {
        self.rot.angle()
    }

    pub fn rotation(&self) -> Matrix2<f64> {
        *self.rot.matrix()
    }

    pub fn translation(&self) -> Vector2<f64> {
        self.trans
    }

    /// Pose error `log(self * reference^-1)`, the registration residual of
    /// an estimate against a reference pose.
    pub fn error_to(&self, reference: &Se2) -> Result<Vector3<f64>> {
        self.compose(&reference.inverse()).log()
    }
}

/// Serializes a planar transform as `{angle, x, y}`, the natural shape for
/// hand-written configuration. Use with `#[serde(with = ...)]`.
pub mod serde_repr {
    use super::Se2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Repr {
        angle: f64,
        x: f64,
        y: f64,
    }

    pub fn serialize<S: Serializer>(t: &Se2, s: S) -> std::result::Result<S::Ok, S::Error> {
        let tr = t.translation();
        Repr {
            angle: t.angle(),
            x: tr[0],
            y: tr[1],
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Se2, D::Error> {
        let r = Repr::deserialize(d)?;
        Ok(Se2::new(r.angle, r.x, r.y))
    }
}

pub(crate) fn validate_rotation_2d(m: &Matrix2<f64>) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("rotation matrix has non-finite entries".into()));
    }
    let gram = m.transpose() * m;
    let ortho = (gram - Matrix2::identity()).abs().max();
    let det = m.determinant();
    if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
        return Err(Error::Data(format!(
            "rotation matrix is not orthonormal: |R'R - I| = {ortho:.3e}, det = {det}"
        )));
    }
    Ok(())
}
