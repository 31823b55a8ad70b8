//! Weighted, trimmed, robust ICP for 2D and 3D clouds.
//!
//! The objective is J = 1/2 e' W e with W = diag(rho(e) .* w_p): per-point
//! robust IRLS weights multiplied by prior weights, with the trim gate
//! folded in. `differentiable: true` selects the smooth variants of every
//! switch (tanh trim gate, pseudo-Huber weight) so the same iteration can
//! run under the gradient tape; the default configuration keeps the exact
//! non-smooth forms for evaluation use.

mod solver;

pub(crate) use solver::{Planar, Spatial};

use nalgebra::{Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::cloud::{AnyCloud, Cloud2, Cloud3, KdTree};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Se2, Se3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorModel {
    PointToPoint,
    PointToPlane,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustLoss {
    None,
    Cauchy { k: f64 },
    Huber { delta: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NnMode {
    HardArgmin,
    /// Softmax-weighted correspondences over squared distances; the
    /// temperature is in squared meters.
    SoftMin {
        temperature: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// `T <- exp(-eta * grad J / sum(w)) * T`. The gradient is normalized by
    /// the total correspondence weight so the step scale does not grow with
    /// cloud size or shrink when weights do.
    GradientDescent { step_size: f64 },
    /// Damped Newton step on the linearized objective. Levenberg damping
    /// `1e-6 * trace(H)/dim` is added when H is near-singular or its
    /// condition number exceeds 1e12.
    GaussNewton,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DimensionMode {
    /// Planar estimation. With 3D clouds the solver works in SE(3) but
    /// zeroes the z, roll, and pitch components of every update step.
    #[serde(rename = "2d")]
    TwoD,
    /// Full 6-DOF estimation; requires 3D clouds.
    #[serde(rename = "3d")]
    ThreeD,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    pub error_model: ErrorModel,
    pub robust_loss: RobustLoss,
    /// Correspondence distance (meters) beyond which points are trimmed.
    /// `None` disables trimming.
    pub trim_distance: Option<f64>,
    /// Steepness of the tanh trim gate used in differentiable mode.
    pub trim_steepness: f64,
    pub nn_mode: NnMode,
    pub update_rule: UpdateRule,
    pub max_iterations: usize,
    /// Step norm below which the solve is declared converged.
    pub convergence_step_norm: f64,
    pub dimension_mode: DimensionMode,
    /// Selects the smooth trim gate and pseudo-Huber weight so every branch
    /// of the iteration is differentiable.
    pub differentiable: bool,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            error_model: ErrorModel::PointToPoint,
            robust_loss: RobustLoss::None,
            trim_distance: None,
            trim_steepness: 10.0,
            nn_mode: NnMode::HardArgmin,
            update_rule: UpdateRule::GaussNewton,
            max_iterations: 50,
            convergence_step_norm: 1e-3,
            dimension_mode: DimensionMode::TwoD,
            differentiable: false,
        }
    }
}

impl IcpConfig {
    /// Configuration skeleton for unrolled training: differentiable
    /// branches, gradient-descent updates, 10 iterations.
    ///
    /// The rotational curvature of the normalized objective grows with the
    /// mean squared point radius, so gradient descent is stable only while
    /// `step_size < 2 / mean(r^2)`. The default suits clouds up to roughly
    /// a 14 m radius; raise it for small scenes if faster settling matters.
    pub fn training() -> Self {
        IcpConfig {
            update_rule: UpdateRule::GradientDescent { step_size: 0.01 },
            max_iterations: 10,
            differentiable: true,
            ..IcpConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, v: f64) -> Result<()> {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
            Ok(())
        }
        if let Some(d) = self.trim_distance {
            positive("trim_distance", d)?;
        }
        positive("trim_steepness", self.trim_steepness)?;
        positive("convergence_step_norm", self.convergence_step_norm)?;
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        match self.robust_loss {
            RobustLoss::None => {}
            RobustLoss::Cauchy { k } => positive("cauchy k", k)?,
            RobustLoss::Huber { delta } => positive("huber delta", delta)?,
        }
        if let NnMode::SoftMin { temperature } = self.nn_mode {
            positive("soft_min temperature", temperature)?;
        }
        if let UpdateRule::GradientDescent { step_size } = self.update_rule {
            positive("gradient_descent step_size", step_size)?;
        }
        Ok(())
    }
}

/// Trim gate on the correspondence distance: 1 for kept points, 0 for
/// trimmed ones, with a smooth tanh transition in differentiable mode.
/// Exactly 0.5 at the trim distance.
pub fn trim_gate(distance: f64, cfg: &IcpConfig) -> f64 {
    match cfg.trim_distance {
        None => 1.0,
        Some(trim) => {
            if cfg.differentiable {
                0.5 * (1.0 - (cfg.trim_steepness * (distance - trim)).tanh())
            } else if distance <= trim {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// IRLS weight of the robust loss at an error norm. Differentiable mode
/// replaces the exact Huber weight with the pseudo-Huber form, which is
/// smooth at the transition.
pub fn robust_weight(error_norm: f64, cfg: &IcpConfig) -> f64 {
    match cfg.robust_loss {
        RobustLoss::None => 1.0,
        RobustLoss::Cauchy { k } => {
            let r = error_norm / k;
            1.0 / (1.0 + r * r)
        }
        RobustLoss::Huber { delta } => {
            if cfg.differentiable {
                let r = error_norm / delta;
                1.0 / (1.0 + r * r).sqrt()
            } else if error_norm <= delta {
                1.0
            } else {
                delta / error_norm
            }
        }
    }
}

/// Point-to-point residual `T s - q`.
pub fn point_error_2d(t: &Se2, source: &Vector2<f64>, target: &Vector2<f64>) -> Vector2<f64> {
    t.apply(source) - target
}

/// Point-to-plane residual `n . (T s - q)`.
pub fn plane_error_2d(
    t: &Se2,
    source: &Vector2<f64>,
    target: &Vector2<f64>,
    normal: &Vector2<f64>,
) -> f64 {
    normal.dot(&(t.apply(source) - target))
}

pub fn point_error_3d(t: &Se3, source: &Vector3<f64>, target: &Vector3<f64>) -> Vector3<f64> {
    t.apply(source) - target
}

pub fn plane_error_3d(
    t: &Se3,
    source: &Vector3<f64>,
    target: &Vector3<f64>,
    normal: &Vector3<f64>,
) -> f64 {
    normal.dot(&(t.apply(source) - target))
}

/// Outcome of a full solve.
#[derive(Clone, Debug, Serialize)]
pub struct IcpResult {
    pub pose: Pose,
    /// Objective at the final pose.
    pub objective: f64,
    /// Update steps actually taken.
    pub iterations: usize,
    /// Whether the last step norm fell below the configured threshold.
    pub converged: bool,
    /// Norm of each update step, in iteration order.
    pub step_norms: Vec<f64>,
    /// Objective before each step, then the final objective; one entry
    /// longer than `step_norms` on a clean run.
    pub objectives: Vec<f64>,
    /// Final per-source-point correspondence weights (trim gate times
    /// robust weight times prior weight).
    pub correspondence_weights: Vec<f64>,
    /// Whether any Gauss-Newton system needed Levenberg damping.
    pub regularized: bool,
}

/// Outcome of a single 2D iteration.
#[derive(Clone, Debug)]
pub struct IcpStep2 {
    pub pose: Se2,
    pub step: Vector3<f64>,
    /// Objective at the input pose.
    pub objective: f64,
    pub correspondence_weights: Vec<f64>,
    pub regularized: bool,
}

/// Outcome of a single 3D iteration.
#[derive(Clone, Debug)]
pub struct IcpStep3 {
    pub pose: Se3,
    pub step: Vector6<f64>,
    pub objective: f64,
    pub correspondence_weights: Vec<f64>,
    pub regularized: bool,
}

pub(crate) fn check_common_2d(source: &Cloud2, target: &Cloud2, cfg: &IcpConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.dimension_mode == DimensionMode::ThreeD {
        return Err(Error::DimensionMismatch(
            "3d estimation requires 3d clouds".into(),
        ));
    }
    if source.is_empty() || target.is_empty() {
        return Err(Error::Data(
            "source and target clouds must be non-empty".into(),
        ));
    }
    if cfg.error_model == ErrorModel::PointToPlane && target.normals().is_none() {
        return Err(Error::Data("point_to_plane needs target normals".into()));
    }
    Ok(())
}

fn check_common_3d(source: &Cloud3, target: &Cloud3, cfg: &IcpConfig) -> Result<()> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::Data(
            "source and target clouds must be non-empty".into(),
        ));
    }
    if cfg.error_model == ErrorModel::PointToPlane && target.normals().is_none() {
        return Err(Error::Data("point_to_plane needs target normals".into()));
    }
    Ok(())
}

/// One ICP iteration: correspondences, weights, one pose update.
pub fn icp_step_2d(
    source: &Cloud2,
    target: &Cloud2,
    tree: &KdTree<2>,
    pose: &Se2,
    cfg: &IcpConfig,
) -> Result<IcpStep2> {
    check_common_2d(source, target, cfg)?;
    let out = solver::step::<Planar>(source, target, tree, pose, cfg, 0)?;
    Ok(IcpStep2 {
        pose: out.pose,
        step: out.step,
        objective: out.objective,
        correspondence_weights: out.weights,
        regularized: out.regularized,
    })
}

pub fn icp_step_3d(
    source: &Cloud3,
    target: &Cloud3,
    tree: &KdTree<3>,
    pose: &Se3,
    cfg: &IcpConfig,
) -> Result<IcpStep3> {
    check_common_3d(source, target, cfg)?;
    let out = solver::step::<Spatial>(source, target, tree, pose, cfg, 0)?;
    Ok(IcpStep3 {
        pose: out.pose,
        step: out.step,
        objective: out.objective,
        correspondence_weights: out.weights,
        regularized: out.regularized,
    })
}

/// Full ICP solve from an initial pose.
pub fn icp_solve_2d(
    source: &Cloud2,
    target: &Cloud2,
    init: &Se2,
    cfg: &IcpConfig,
) -> Result<IcpResult> {
    check_common_2d(source, target, cfg)?;
    solver::solve::<Planar>(source, target, init, cfg)
}

pub fn icp_solve_3d(
    source: &Cloud3,
    target: &Cloud3,
    init: &Se3,
    cfg: &IcpConfig,
) -> Result<IcpResult> {
    check_common_3d(source, target, cfg)?;
    solver::solve::<Spatial>(source, target, init, cfg)
}

/// Runtime-dimensioned entry point used by the CLI.
pub fn icp_solve(
    source: &AnyCloud,
    target: &AnyCloud,
    init: &Pose,
    cfg: &IcpConfig,
) -> Result<IcpResult> {
    match (source, target, init) {
        (AnyCloud::Planar(s), AnyCloud::Planar(t), Pose::Planar(p)) => icp_solve_2d(s, t, p, cfg),
        (AnyCloud::Spatial(s), AnyCloud::Spatial(t), Pose::Spatial(p)) => {
            icp_solve_3d(s, t, p, cfg)
        }
        _ => Err(Error::DimensionMismatch(format!(
            "source is {}d, target is {}d, initial pose is {}d",
            source.dim(),
            target.dim(),
            init.dim()
        ))),
    }
}
