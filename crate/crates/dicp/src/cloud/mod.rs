//! Pointcloud containers, CSV IO, nearest-neighbour search, and normal
//! estimation.

mod csv;
mod kdtree;
mod normals;

pub use csv::{load_csv, save_csv};
pub use kdtree::KdTree;
pub use normals::{estimate_normals, estimate_normals_toward};

use nalgebra::SVector;

use crate::error::{Error, Result};
use crate::geometry::{Se2, Se3};

/// A cloud of `D`-dimensional points with optional per-point unit normals
/// and optional prior weights in `[0, 1]`.
///
/// A zero normal marks a point whose neighbourhood was too degenerate for
/// estimation; consumers that need normals treat such points as unusable
/// rather than erroring out.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<const D: usize> {
    points: Vec<SVector<f64, D>>,
    normals: Option<Vec<SVector<f64, D>>>,
    prior_weights: Option<Vec<f64>>,
    frame_id: String,
}

pub type Cloud2 = PointCloud<2>;
pub type Cloud3 = PointCloud<3>;

impl<const D: usize> PointCloud<D> {
    pub fn new(points: Vec<SVector<f64, D>>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("point {i} has non-finite coordinates")));
            }
        }
        Ok(PointCloud {
            points,
            normals: None,
            prior_weights: None,
            frame_id: String::new(),
        })
    }

    pub fn with_normals(mut self, normals: Vec<SVector<f64, D>>) -> Result<Self> {
        if normals.len() != self.points.len() {
            return Err(Error::Data(format!(
                "{} normals for {} points",
                normals.len(),
                self.points.len()
            )));
        }
        for (i, n) in normals.iter().enumerate() {
            if n.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("normal {i} has non-finite components")));
            }
            let len = n.norm();
            if len > 1e-12 && (len - 1.0).abs() > 1e-6 {
                return Err(Error::Data(format!(
                    "normal {i} has length {len}; normals must be unit or zero"
                )));
            }
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn with_prior_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.points.len() {
            return Err(Error::Data(format!(
                "{} weights for {} points",
                weights.len(),
                self.points.len()
            )));
        }
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() || !(0.0..=1.0).contains(&w) {
                return Err(Error::Data(format!(
                    "weight {i} is {w}; must lie in [0, 1]"
                )));
            }
        }
        self.prior_weights = Some(weights);
        Ok(self)
    }

    pub fn with_frame_id(mut self, frame_id: impl Into<String>) -> Self {
        self.frame_id = frame_id.into();
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[SVector<f64, D>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &SVector<f64, D> {
        &self.points[i]
    }

    pub fn normals(&self) -> Option<&[SVector<f64, D>]> {
        self.normals.as_deref()
    }

    pub fn prior_weights(&self) -> Option<&[f64]> {
        self.prior_weights.as_deref()
    }

    /// Prior weight of point `i`; 1.0 when no weights are attached.
    pub fn prior_weight(&self, i: usize) -> f64 {
        self.prior_weights.as_ref().map_or(1.0, |w| w[i])
    }

    pub fn frame_id(&self) -> &str {
        &self.frame_id
    }
}

impl Cloud2 {
    /// Applies a rigid transform to points and rotates normals with it.
    pub fn transformed(&self, t: &Se2) -> Cloud2 {
        Cloud2 {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| t.rotate(n)).collect()),
            prior_weights: self.prior_weights.clone(),
            frame_id: self.frame_id.clone(),
        }
    }
}

impl Cloud3 {
    /// Applies a rigid transform to points and rotates normals with it.
    pub fn transformed(&self, t: &Se3) -> Cloud3 {
        Cloud3 {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| t.rotate(n)).collect()),
            prior_weights: self.prior_weights.clone(),
            frame_id: self.frame_id.clone(),
        }
    }
}

/// A cloud whose dimension is decided at runtime (file loading, CLI).
#[derive(Clone, Debug, PartialEq)]
pub enum AnyCloud {
    Planar(Cloud2),
    Spatial(Cloud3),
}

impl AnyCloud {
    pub fn dim(&self) -> usize {
        match self {
            AnyCloud::Planar(_) => 2,
            AnyCloud::Spatial(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AnyCloud::Planar(c) => c.len(),
            AnyCloud::Spatial(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The planar cloud, or a dimension error for spatial data.
    pub fn planar(self) -> Result<Cloud2> {
        match self {
            AnyCloud::Planar(c) => Ok(c),
            AnyCloud::Spatial(_) => Err(Error::DimensionMismatch(
                "expected a planar cloud, found spatial data".into(),
            )),
        }
    }

    /// The spatial cloud, or a dimension error for planar data.
    pub fn spatial(self) -> Result<Cloud3> {
        match self {
            AnyCloud::Spatial(c) => Ok(c),
            AnyCloud::Planar(_) => Err(Error::DimensionMismatch(
                "expected a spatial cloud, found planar data".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Vector2, Vector3};

    #[test]
    fn rejects_non_finite_points() {
        let pts = vec![Vector2::new(0.0, f64::NAN)];
        assert!(Cloud2::new(pts).is_err());
    }

    #[test]
    fn rejects_out_of_range_weights() {
        let cloud = Cloud2::new(vec![Vector2::zeros()]).unwrap();
        assert!(cloud.clone().with_prior_weights(vec![1.5]).is_err());
        assert!(cloud.clone().with_prior_weights(vec![-0.1]).is_err());
        assert!(cloud.with_prior_weights(vec![0.5]).is_ok());
    }

    #[test]
    fn dimension_accessors_unwrap_only_the_matching_variant() {
        let planar = AnyCloud::Planar(Cloud2::new(vec![Vector2::zeros()]).unwrap());
        let spatial = AnyCloud::Spatial(Cloud3::new(vec![Vector3::zeros()]).unwrap());
        assert!(planar.clone().planar().is_ok());
        assert!(planar.spatial().is_err());
        assert!(spatial.clone().spatial().is_ok());
        assert!(spatial.planar().is_err());
    }

    #[test]
    fn rejects_non_unit_normals_but_accepts_zero() {
        let cloud = Cloud2::new(vec![Vector2::zeros(), Vector2::new(1.0, 0.0)]).unwrap();
        let bad = vec![Vector2::new(0.5, 0.0), Vector2::new(0.0, 1.0)];
        assert!(cloud.clone().with_normals(bad).is_err());
        let ok = vec![Vector2::zeros(), Vector2::new(0.0, 1.0)];
        assert!(cloud.with_normals(ok).is_ok());
    }

    #[test]
    fn default_prior_weight_is_one() {
        let cloud = Cloud2::new(vec![Vector2::zeros()]).unwrap();
        assert_eq!(cloud.prior_weight(0), 1.0);
    }

    #[test]
    fn transform_rotates_normals_and_keeps_weights() {
        let cloud = Cloud2::new(vec![Vector2::new(1.0, 0.0)])
            .unwrap()
            .with_normals(vec![Vector2::new(1.0, 0.0)])
            .unwrap()
            .with_prior_weights(vec![0.25])
            .unwrap();
        let t = Se2::new(std::f64::consts::FRAC_PI_2, 0.0, 3.0);
        let out = cloud.transformed(&t);
        let n = out.normals().unwrap()[0];
        assert!((n - Vector2::new(0.0, 1.0)).norm() < 1e-15);
        assert!((out.point(0) - Vector2::new(0.0, 4.0)).norm() < 1e-15);
        assert_eq!(out.prior_weight(0), 0.25);
    }

    #[test]
    fn spatial_transform_is_isometric() {
        let cloud = Cloud3::new(vec![
            Vector3::new(1.0, 2.0, 3.0),
            Vector3::new(-0.5, 0.0, 1.5),
        ])
        .unwrap();
        let t = Se3::exp(&nalgebra::Vector6::new(0.3, -0.2, 0.1, 0.4, 0.2, -0.1));
        let out = cloud.transformed(&t);
        let before = (cloud.point(0) - cloud.point(1)).norm();
        let after = (out.point(0) - out.point(1)).norm();
        assert!((before - after).abs() < 1e-12);
    }
}
