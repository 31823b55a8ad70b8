//! Spatial rigid transforms with exp/log maps.
//!
//! Twists are ordered translation-first: `(rho, omega)`. Rotations are kept
//! as matrices; the log map goes through a unit quaternion internally because
//! the quaternion extraction stays well-conditioned over the whole angle
//! range, while `acos` of the matrix trace does not.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::geometry::se2::PI_TOLERANCE;

/// Squared-angle threshold for series evaluation of the Rodrigues and left
/// Jacobian coefficients. Below theta = 0.01 the three-term series are exact
/// to machine precision; the closed forms start losing digits there.
const TAYLOR_THRESHOLD_SQ_3D: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Se3 {
    rot: Rotation3<f64>,
    trans: Vector3<f64>,
}

fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0)
}

/// Coefficients a = sin(t)/t, b = (1-cos(t))/t^2, c = (t-sin(t))/t^3 of
/// R = I + aK + bK^2 and V = I + bK + cK^2, taking theta^2 to avoid a
/// square root on the series path.
fn rodrigues_coeffs(theta_sq: f64) -> (f64, f64, f64) {
    if theta_sq < TAYLOR_THRESHOLD_SQ_3D {
        (
            1.0 - theta_sq / 6.0 + theta_sq * theta_sq / 120.0,
            0.5 - theta_sq / 24.0 + theta_sq * theta_sq / 720.0,
            1.0 / 6.0 - theta_sq / 120.0 + theta_sq * theta_sq / 5040.0,
        )
    } else {
        let t = theta_sq.sqrt();
        let s = t.sin();
        (s / t, (1.0 - t.cos()) / theta_sq, (t - s) / (theta_sq * t))
    }
}

/// Second-order coefficient of V^-1 = I - K/2 + c K^2.
fn inv_jacobian_coeff(theta_sq: f64) -> f64 {
    if theta_sq < TAYLOR_THRESHOLD_SQ_3D {
        1.0 / 12.0 + theta_sq / 720.0 + theta_sq * theta_sq / 30240.0
    } else {
        let t = theta_sq.sqrt();
        (1.0 - t * t.sin() / (2.0 * (1.0 - t.cos()))) / theta_sq
    }
}

impl Se3 {
    pub fn identity() -> Self {
        Se3 {
            rot: Rotation3::identity(),
            trans: Vector3::zeros(),
        }
    }

    /// Builds a transform from a raw rotation matrix, validating
    /// orthonormality and determinant within 1e-9.
    pub fn from_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        validate_rotation_3d(rotation)?;
        Ok(Se3 {
            rot: Rotation3::from_matrix_unchecked(*rotation),
            trans: translation,
        })
    }

    /// Exponential map of the twist `(rho_x, rho_y, rho_z, w_x, w_y, w_z)`.
    pub fn exp(xi: &Vector6<f64>) -> Self {
        let rho = xi.fixed_rows::<3>(0).into_owned();
        let omega = xi.fixed_rows::<3>(3).into_owned();
        let k = skew(&omega);
        let k2 = k * k;
        let (a, b, c) = rodrigues_coeffs(omega.norm_squared());
        let r = Matrix3::identity() + k * a + k2 * b;
        let v = Matrix3::identity() + k * b + k2 * c;
        Se3 {
            rot: Rotation3::from_matrix_unchecked(r),
            trans: v * rho,
        }
    }

    /// Log map back to a twist. Errors when the rotation angle lies within
    /// `PI_TOLERANCE` of pi.
    pub fn log(&self) -> Result<Vector6<f64>> {
        let q = UnitQuaternion::from_rotation_matrix(&self.rot);
        let q = if q.w < 0.0 {
            UnitQuaternion::new_unchecked(-q.into_inner())
        } else {
            q
        };
        let imag = q.imag();
        let imag_norm = imag.norm();
        let theta = 2.0 * imag_norm.atan2(q.w);
        if theta >= std::f64::consts::PI - PI_TOLERANCE {
            return Err(Error::LogSingularity { angle: theta });
        }
        let omega = if imag_norm < 1e-9 {
            // theta / sin(theta/2) -> 2 as theta -> 0; the correction is
            // below machine precision here.
            imag * 2.0
        } else {
            imag * (theta / imag_norm)
        };
        let k = skew(&omega);
        let theta_sq = theta * theta;
        let v_inv = Matrix3::identity() - k * 0.5 + k * k * inv_jacobian_coeff(theta_sq);
        let mut xi = Vector6::zeros();
        xi.fixed_rows_mut::<3>(0).copy_from(&(v_inv * self.trans));
        xi.fixed_rows_mut::<3>(3).copy_from(&omega);
        Ok(xi)
    }

    pub fn compose(&self, other: &Se3) -> Se3 {
        Se3 {
            rot: self.rot * other.rot,
            trans: self.rot * other.trans + self.trans,
        }
    }

    pub fn inverse(&self) -> Se3 {
        let inv = self.rot.inverse();
        Se3 {
            rot: inv,
            trans: -(inv * self.trans),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot * p + self.trans
    }

    /// Rotates a direction vector without translating it.
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rot * v
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        *self.rot.matrix()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.trans
    }

    /// Pose error `log(self * reference^-1)`.
    pub fn error_to(&self, reference: &Se3) -> Result<Vector6<f64>> {
        self.compose(&reference.inverse()).log()
    }
}

pub(crate) fn validate_rotation_3d(m: &Matrix3<f64>) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("rotation matrix has non-finite entries".into()));
    }
    let gram = m.transpose() * m;
    let ortho = (gram - Matrix3::identity()).abs().max();
    let det = m.determinant();
    if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
        return Err(Error::Data(format!(
            "rotation matrix is not orthonormal: |R'R - I| = {ortho:.3e}, det = {det}"
        )));
    }
    Ok(())
}
