//! Dimension-erased pose and twist types.
//!
//! These wrap [`Se2`]/[`Se3`] for code paths that decide the dimension at
//! runtime (file loading, the CLI). The JSON form is
//! `{"dim": 2|3, "rotation": [... row-major ...], "translation": [...]}`;
//! rotations are validated for orthonormality within 1e-9 on load.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3, Vector6};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::geometry::{Se2, Se3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pose {
    Planar(Se2),
    Spatial(Se3),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Twist {
    Planar(Vector3<f64>),
    Spatial(Vector6<f64>),
}

impl Pose {
    pub fn identity(dim: usize) -> Result<Pose> {
        match dim {
            2 => Ok(Pose::Planar(Se2::identity())),
            3 => Ok(Pose::Spatial(Se3::identity())),
            other => Err(Error::Config(format!(
                "pose dimension must be 2 or 3, got {other}"
            ))),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Pose::Planar(_) => 2,
            Pose::Spatial(_) => 3,
        }
    }
}

impl Twist {
    pub fn dim(&self) -> usize {
        match self {
            Twist::Planar(_) => 2,
            Twist::Spatial(_) => 3,
        }
    }

    pub fn norm(&self) -> f64 {
        match self {
            Twist::Planar(v) => v.norm(),
            Twist::Spatial(v) => v.norm(),
        }
    }
}

pub fn exp_map(xi: &Twist) -> Result<Pose> {
    match xi {
        Twist::Planar(v) => {
            ensure_finite(v.as_slice())?;
            Ok(Pose::Planar(Se2::exp(v)))
        }
        Twist::Spatial(v) => {
            ensure_finite(v.as_slice())?;
            Ok(Pose::Spatial(Se3::exp(v)))
        }
    }
}

pub fn log_map(pose: &Pose) -> Result<Twist> {
    match pose {
        Pose::Planar(t) => Ok(Twist::Planar(t.log()?)),
        Pose::Spatial(t) => Ok(Twist::Spatial(t.log()?)),
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Result<Pose> {
    match (a, b) {
        (Pose::Planar(a), Pose::Planar(b)) => Ok(Pose::Planar(a.compose(b))),
        (Pose::Spatial(a), Pose::Spatial(b)) => Ok(Pose::Spatial(a.compose(b))),
        _ => Err(Error::DimensionMismatch(format!(
            "cannot compose a {}d pose with a {}d pose",
            a.dim(),
            b.dim()
        ))),
    }
}

pub fn inverse(pose: &Pose) -> Pose {
    match pose {
        Pose::Planar(t) => Pose::Planar(t.inverse()),
        Pose::Spatial(t) => Pose::Spatial(t.inverse()),
    }
}

/// Registration residual `log(t_hat * t_gt^-1)` as a twist.
pub fn pose_error(t_hat: &Pose, t_gt: &Pose) -> Result<Twist> {
    log_map(&compose(t_hat, &inverse(t_gt))?)
}

fn ensure_finite(values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("twist has non-finite entries".into()));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    dim: usize,
    rotation: Vec<f64>,
    translation: Vec<f64>,
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = match self {
            Pose::Planar(t) => {
                let r = t.rotation();
                PoseRepr {
                    dim: 2,
                    rotation: vec![r[(0, 0)], r[(0, 1)], r[(1, 0)], r[(1, 1)]],
                    translation: t.translation().as_slice().to_vec(),
                }
            }
            Pose::Spatial(t) => {
                let r = t.rotation();
                PoseRepr {
                    dim: 3,
                    rotation: (0..3)
                        .flat_map(|i| (0..3).map(move |j| r[(i, j)]))
                        .collect(),
                    translation: t.translation().as_slice().to_vec(),
                }
            }
        };
        repr.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = PoseRepr::deserialize(deserializer)?;
        match repr.dim {
            2 => {
                if repr.rotation.len() != 4 || repr.translation.len() != 2 {
                    return Err(D::Error::custom(
                        "2d pose needs a 4-entry rotation and 2-entry translation",
                    ));
                }
                let r = &repr.rotation;
                let m = Matrix2::new(r[0], r[1], r[2], r[3]);
                let t = Vector2::new(repr.translation[0], repr.translation[1]);
                Se2::from_matrix(&m, t)
                    .map(Pose::Planar)
                    .map_err(D::Error::custom)
            }
            3 => {
                if repr.rotation.len() != 9 || repr.translation.len() != 3 {
                    return Err(D::Error::custom(
                        "3d pose needs a 9-entry rotation and 3-entry translation",
                    ));
                }
                let r = &repr.rotation;
                let m = Matrix3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]);
                let t = Vector3::new(
                    repr.translation[0],
                    repr.translation[1],
                    repr.translation[2],
                );
                Se3::from_matrix(&m, t)
                    .map(Pose::Spatial)
                    .map_err(D::Error::custom)
            }
            other => Err(D::Error::custom(format!("dim must be 2 or 3, got {other}"))),
        }
    }
}
