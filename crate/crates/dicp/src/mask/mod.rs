//! Cartesian weight-mask grids: bilinear point sampling with an exposed
//! Jacobian, binary supervisory masks from map points, and the mask loss
//! terms.
//!
//! A mask is a square W x W grid of reliabilities in [0, 1] centered on the
//! sensor. Pixel (row r, col c) has its center at metric
//! `x = (c - (W-1)/2) * pixel_size`, `y = (r - (W-1)/2) * pixel_size`, so
//! columns advance along +x and rows along +y.

mod loss;
mod pgm;

pub use loss::{bce_grad, bce_loss, icp_loss, total_loss, LossBreakdown, LossWeights};
pub use pgm::{load_mask_pgm, save_mask_pgm};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::cloud::Cloud2;
use crate::error::{Error, Result};
use crate::geometry::Se2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightMask {
    values: Vec<f64>,
    width: usize,
    pixel_size: f64,
}

/// Bilinear footprint of one sample: at most 4 pixels whose coefficients
/// sum to 1, or all-zero for points outside the mask extent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleSupport {
    pub indices: [usize; 4],
    pub coeffs: [f64; 4],
}

impl SampleSupport {
    const EMPTY: SampleSupport = SampleSupport {
        indices: [0; 4],
        coeffs: [0.0; 4],
    };
}

impl WeightMask {
    pub fn new(values: Vec<f64>, width: usize, pixel_size: f64) -> Result<Self> {
        if width == 0 {
            return Err(Error::Config("mask width must be at least 1".into()));
        }
        if !pixel_size.is_finite() || pixel_size <= 0.0 {
            return Err(Error::Config(format!(
                "mask pixel_size must be positive and finite, got {pixel_size}"
            )));
        }
        if values.len() != width * width {
            return Err(Error::DimensionMismatch(format!(
                "mask expects {} values for width {width}, got {}",
                width * width,
                values.len()
            )));
        }
        if let Some(v) = values
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::Data(format!(
                "mask values must lie in [0, 1], got {v}"
            )));
        }
        Ok(WeightMask {
            values,
            width,
            pixel_size,
        })
    }

    /// Constant-valued mask.
    pub fn filled(value: f64, width: usize, pixel_size: f64) -> Result<Self> {
        WeightMask::new(vec![value; width * width], width, pixel_size)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Metric center of a pixel.
    pub fn pixel_center(&self, row: usize, col: usize) -> Vector2<f64> {
        let half = (self.width as f64 - 1.0) / 2.0;
        Vector2::new(
            (col as f64 - half) * self.pixel_size,
            (row as f64 - half) * self.pixel_size,
        )
    }

    /// Continuous pixel coordinates (col, row) of a metric point.
    fn grid_coords(&self, p: &Vector2<f64>) -> (f64, f64) {
        let half = (self.width as f64 - 1.0) / 2.0;
        (p[0] / self.pixel_size + half, p[1] / self.pixel_size + half)
    }

    /// Bilinear footprint of one metric point. Points outside the convex
    /// hull of pixel centers get an empty (all-zero) support: out-of-extent
    /// detections must not influence the registration.
    pub fn sample_support(&self, p: &Vector2<f64>) -> SampleSupport {
        let (u, v) = self.grid_coords(p);
        let limit = (self.width - 1) as f64;
        if !(0.0..=limit).contains(&u) || !(0.0..=limit).contains(&v) {
            return SampleSupport::EMPTY;
        }
        if self.width == 1 {
            // Single-pixel mask: the only in-extent point is the center.
            return SampleSupport {
                indices: [0; 4],
                coeffs: [1.0, 0.0, 0.0, 0.0],
            };
        }
        let c0 = (u.floor() as usize).min(self.width - 2);
        let r0 = (v.floor() as usize).min(self.width - 2);
        let fu = u - c0 as f64;
        let fv = v - r0 as f64;
        SampleSupport {
            indices: [
                r0 * self.width + c0,
                r0 * self.width + c0 + 1,
                (r0 + 1) * self.width + c0,
                (r0 + 1) * self.width + c0 + 1,
            ],
            coeffs: [
                (1.0 - fu) * (1.0 - fv),
                fu * (1.0 - fv),
                (1.0 - fu) * fv,
                fu * fv,
            ],
        }
    }

    /// Bilinear sample at one metric point. Clamped to [0, 1]: the exact
    /// blend of in-range values cannot leave the range, but the rounded sum
    /// can overshoot by an ulp, which downstream weight validation rejects.
    pub fn sample(&self, p: &Vector2<f64>) -> f64 {
        let s = self.sample_support(p);
        s.coeffs
            .iter()
            .zip(s.indices.iter())
            .map(|(c, i)| c * self.values[*i])
            .sum::<f64>()
            .clamp(0.0, 1.0)
    }

    /// Per-point bilinear weights for a cloud.
    pub fn sample_cloud(&self, cloud: &Cloud2) -> Vec<f64> {
        cloud.points().iter().map(|p| self.sample(p)).collect()
    }

    /// Sparse Jacobian of `sample_cloud` w.r.t. mask pixels: one footprint
    /// row per point.
    pub fn sample_jacobian(&self, cloud: &Cloud2) -> Vec<SampleSupport> {
        cloud
            .points()
            .iter()
            .map(|p| self.sample_support(p))
            .collect()
    }

    /// Mask scaled so its maximum value is one; an all-zero mask is
    /// returned unchanged.
    pub fn normalized(&self) -> WeightMask {
        let max = self.values.iter().cloned().fold(0.0, f64::max);
        if max <= 0.0 {
            return self.clone();
        }
        WeightMask {
            values: self.values.iter().map(|v| v / max).collect(),
            width: self.width,
            pixel_size: self.pixel_size,
        }
    }

    pub fn same_geometry(&self, other: &WeightMask) -> bool {
        self.width == other.width && self.pixel_size == other.pixel_size
    }
}

/// Binary supervisory mask: map points are brought into the sensor frame by
/// `map_to_sensor`, points within `max_range` of the sensor are rounded to
/// their nearest pixel, and those pixels are set to one.
pub fn make_map_mask(
    map: &Cloud2,
    map_to_sensor: &Se2,
    width: usize,
    pixel_size: f64,
    max_range: f64,
) -> Result<WeightMask> {
    if !max_range.is_finite() || max_range <= 0.0 {
        return Err(Error::Config(format!(
            "max_range must be positive and finite, got {max_range}"
        )));
    }
    let mut mask = WeightMask::filled(0.0, width, pixel_size)?;
    let half = (width as f64 - 1.0) / 2.0;
    for p in map.points() {
        let s = map_to_sensor.apply(p);
        if s.norm() > max_range {
            continue;
        }
        let col = (s[0] / pixel_size + half).round();
        let row = (s[1] / pixel_size + half).round();
        if col < 0.0 || row < 0.0 || col >= width as f64 || row >= width as f64 {
            continue;
        }
        mask.values[row as usize * width + col as usize] = 1.0;
    }
    Ok(mask)
}
