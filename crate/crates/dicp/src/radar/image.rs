//! Rasterization of a polar scan into a square Cartesian intensity image.

use nalgebra::Vector2;

use crate::error::{Error, Result};

use super::PolarScan;

/// Square intensity image on the same metric grid as a weight mask: column
/// index maps to x, row index to y, pixel `(r, c)` is centered at
/// `((c - (w-1)/2) * pixel_size, (r - (w-1)/2) * pixel_size)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CartesianImage {
    values: Vec<f64>,
    width: usize,
    pixel_size: f64,
}

impl CartesianImage {
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

    pub fn pixel_center(&self, row: usize, col: usize) -> Vector2<f64> {
        let half = (self.width as f64 - 1.0) / 2.0;
        Vector2::new(
            (col as f64 - half) * self.pixel_size,
            (row as f64 - half) * self.pixel_size,
        )
    }
}

/// Exact for equal endpoints, unlike `(1-t)*a + t*b`.
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Intensity at fractional range bin `u` along one azimuth row, linearly
/// interpolated between neighboring bin centers. Negative `u` (inside the
/// first half bin) clamps to bin 0; past the last bin center the row
/// contributes nothing.
fn sample_range(row: &[f64], u: f64) -> f64 {
    let last = row.len() - 1;
    if u > last as f64 {
        return 0.0;
    }
    let u = u.max(0.0);
    let r0 = (u as usize).min(last.saturating_sub(1));
    if row.len() == 1 {
        return row[0];
    }
    lerp(row[r0], row[r0 + 1], u - r0 as f64)
}

/// Renders the scan onto a `width x width` Cartesian grid by bilinear
/// interpolation in (range, azimuth), then scales so the brightest pixel is
/// 1. An all-zero scan renders as an all-zero image. Pixels beyond the last
/// range bin center are zero; azimuth wraps around the full circle.
pub fn polar_to_cartesian_image(
    scan: &PolarScan,
    width: usize,
    pixel_size: f64,
) -> Result<CartesianImage> {
    if width == 0 {
        return Err(Error::Config("image width must be at least 1".into()));
    }
    if !pixel_size.is_finite() || pixel_size <= 0.0 {
        return Err(Error::Config(format!(
            "pixel_size must be positive and finite, got {pixel_size}"
        )));
    }
    let az = scan.azimuth_angles();
    let a_count = az.len();
    let res = scan.range_resolution();
    let half = (width as f64 - 1.0) / 2.0;

    let mut values = vec![0.0; width * width];
    for row in 0..width {
        let y = (row as f64 - half) * pixel_size;
        for col in 0..width {
            let x = (col as f64 - half) * pixel_size;
            let rho = x.hypot(y);
            let u = rho / res - 0.5;
            let mut theta = y.atan2(x);
            if theta < 0.0 {
                theta += std::f64::consts::TAU;
            }
            let v = if a_count == 1 {
                sample_range(scan.row(0), u)
            } else if theta < az[0] || theta >= az[a_count - 1] {
                // Wrap segment from the last azimuth around to the first.
                let gap = az[0] + std::f64::consts::TAU - az[a_count - 1];
                let local = if theta >= az[a_count - 1] {
                    theta - az[a_count - 1]
                } else {
                    theta + std::f64::consts::TAU - az[a_count - 1]
                };
                lerp(
                    sample_range(scan.row(a_count - 1), u),
                    sample_range(scan.row(0), u),
                    local / gap,
                )
            } else {
                let hi = az.partition_point(|&a| a <= theta);
                let t = (theta - az[hi - 1]) / (az[hi] - az[hi - 1]);
                lerp(
                    sample_range(scan.row(hi - 1), u),
                    sample_range(scan.row(hi), u),
                    t,
                )
            };
            values[row * width + col] = v;
        }
    }

    let max = values.iter().cloned().fold(0.0_f64, f64::max);
    if max > 0.0 {
        for v in &mut values {
            *v /= max;
        }
    }
    Ok(CartesianImage {
        values,
        width,
        pixel_size,
    })
}
