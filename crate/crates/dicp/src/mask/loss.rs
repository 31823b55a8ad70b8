//! Loss terms for mask training: binary cross-entropy against the
//! supervisory mask and the weighted squared pose error, combined as
//! `total = l_icp + gamma * l_bce`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Twist;
use crate::mask::WeightMask;

/// Mask values are clamped to [EPS, 1 - EPS] before the logarithms.
const BCE_EPS: f64 = 1e-7;

/// Relative weights of the loss terms: `alpha` on squared translation
/// error, `beta` on squared heading error, `gamma` on the cross-entropy
/// term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be nonnegative and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_icp: f64,
    pub l_bce: f64,
    pub total: f64,
}

fn check_geometry(mask: &WeightMask, target: &WeightMask) -> Result<()> {
    if !mask.same_geometry(target) {
        return Err(Error::DimensionMismatch(format!(
            "mask geometry {}px/{} does not match target {}px/{}",
            mask.width(),
            mask.pixel_size(),
            target.width(),
            target.pixel_size()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy of `mask` against `target` over all pixels.
pub fn bce_loss(mask: &WeightMask, target: &WeightMask) -> Result<f64> {
    check_geometry(mask, target)?;
    let n = mask.values().len() as f64;
    let mut total = 0.0;
    for (m, t) in mask.values().iter().zip(target.values()) {
        let m = m.clamp(BCE_EPS, 1.0 - BCE_EPS);
        total -= t * m.ln() + (1.0 - t) * (1.0 - m).ln();
    }
    Ok(total / n)
}

/// Gradient of `bce_loss` w.r.t. the mask pixels. Pixels saturated past the
/// clamp bounds get zero gradient.
pub fn bce_grad(mask: &WeightMask, target: &WeightMask) -> Result<Vec<f64>> {
    check_geometry(mask, target)?;
    let n = mask.values().len() as f64;
    Ok(mask
        .values()
        .iter()
        .zip(target.values())
        .map(|(m, t)| {
            if *m < BCE_EPS || *m > 1.0 - BCE_EPS {
                0.0
            } else {
                (-t / m + (1.0 - t) / (1.0 - m)) / n
            }
        })
        .collect())
}

/// Weighted squared pose error `alpha * (e_x^2 + e_y^2) + beta * e_phi^2`
/// of a planar error twist.
pub fn icp_loss(e: &Twist, lw: &LossWeights) -> Result<f64> {
    match e {
        Twist::Planar(v) => Ok(lw.alpha * (v[0] * v[0] + v[1] * v[1]) + lw.beta * v[2] * v[2]),
        Twist::Spatial(_) => Err(Error::DimensionMismatch(
            "the pose-error loss is defined for planar twists".into(),
        )),
    }
}

/// Composite training loss `l_icp + gamma * l_bce`.
pub fn total_loss(l_icp: f64, l_bce: f64, lw: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        l_icp,
        l_bce,
        total: l_icp + lw.gamma * l_bce,
    }
}
