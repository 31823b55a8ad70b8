//! Reverse-mode differentiation through the unrolled ICP iteration.
//!
//! [`solve_with_grad`] runs a fixed number of gradient-descent ICP steps with
//! every branch smooth, scores the final pose against a reference, and
//! returns the loss gradient with respect to prior weights, source
//! coordinates, or the pixels of a weight mask. [`check_gradient`] replays
//! the identical pipeline on plain floats under central differences, which
//! makes it an independent oracle for the taped gradient.
//!
//! Differentiation is planar only: the training regime this serves estimates
//! (x, y, heading).

pub(crate) mod scalar;
pub(crate) mod tape;
pub(crate) mod unrolled;

use serde::{Deserialize, Serialize};

use crate::cloud::{Cloud2, KdTree};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Se2};
use crate::icp::{IcpConfig, IcpResult, NnMode, UpdateRule};
use crate::mask::{LossWeights, WeightMask};
use unrolled::unrolled_gd;

pub use tape::{Gradients, Tape, Var};

/// Hard cap on unrolled iterations; the tape for a full solve grows linearly
/// with this and the request is almost certainly a mistake beyond it.
pub const MAX_UNROLL_ITERATIONS: usize = 64;

/// How the correspondence step is treated under differentiation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NnGradMode {
    /// Hard argmin correspondences with the match index held fixed; exact
    /// almost everywhere because the index is locally constant.
    LocallyConstant,
    /// Softmax-blended correspondences differentiated through the blend.
    Soft,
}

/// Which inputs the gradient is taken with respect to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffTarget {
    /// One gradient entry per source point's prior weight.
    PriorWeights,
    /// Interleaved `[x0, y0, x1, y1, ...]` over source coordinates.
    SourcePoints,
    /// One entry per pixel of the weight mask supplied to the solve; the
    /// mask samples replace any prior weights stored on the cloud.
    MaskPixels,
}

/// Weighted squared pose error against a reference transform:
/// `alpha (e_x^2 + e_y^2) + beta e_heading^2` with `e = log(T T_ref^-1)`.
/// The `gamma` loss weight belongs to the mask cross-entropy term and is
/// ignored here.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorLoss {
    #[serde(with = "crate::geometry::se2_serde")]
    pub reference: Se2,
    #[serde(default)]
    pub weights: LossWeights,
}

impl Default for PoseErrorLoss {
    fn default() -> Self {
        PoseErrorLoss {
            reference: Se2::identity(),
            weights: LossWeights::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradRequest {
    pub wrt: DiffTarget,
    pub nn_grad_mode: NnGradMode,
    /// Number of gradient-descent steps to differentiate through; the solve
    /// runs exactly this many, ignoring the step-norm early exit.
    pub unroll_iterations: usize,
    pub loss: PoseErrorLoss,
}

impl Default for GradRequest {
    fn default() -> Self {
        GradRequest {
            wrt: DiffTarget::PriorWeights,
            nn_grad_mode: NnGradMode::LocallyConstant,
            unroll_iterations: 10,
            loss: PoseErrorLoss::default(),
        }
    }
}

/// Loss value and its gradient, in the layout fixed by [`DiffTarget`].
#[derive(Clone, Debug, Serialize)]
pub struct GradResult {
    pub loss_value: f64,
    pub gradient: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

/// Per-entry comparison of the taped gradient against central differences.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub loss_value: f64,
    pub entries: Vec<GradCheckEntry>,
    pub max_relative_error: f64,
    pub mean_relative_error: f64,
}

fn validate_request(
    source: &Cloud2,
    target: &Cloud2,
    cfg: &IcpConfig,
    req: &GradRequest,
    mask: Option<&WeightMask>,
) -> Result<()> {
    crate::icp::check_common_2d(source, target, cfg)?;
    if !cfg.differentiable {
        return Err(Error::Config(
            "gradient solves need `differentiable: true` so every branch is smooth".into(),
        ));
    }
    if !matches!(cfg.update_rule, UpdateRule::GradientDescent { .. }) {
        return Err(Error::Config(
            "gradient solves differentiate the gradient_descent update rule only".into(),
        ));
    }
    if req.unroll_iterations == 0 || req.unroll_iterations > MAX_UNROLL_ITERATIONS {
        return Err(Error::Config(format!(
            "unroll_iterations must be in 1..={MAX_UNROLL_ITERATIONS}, got {}",
            req.unroll_iterations
        )));
    }
    match (req.nn_grad_mode, cfg.nn_mode) {
        (NnGradMode::LocallyConstant, NnMode::HardArgmin) => {}
        (NnGradMode::Soft, NnMode::SoftMin { .. }) => {}
        (NnGradMode::LocallyConstant, NnMode::SoftMin { .. }) => {
            return Err(Error::Config(
                "nn_grad_mode locally_constant pairs with hard_argmin correspondences".into(),
            ));
        }
        (NnGradMode::Soft, NnMode::HardArgmin) => {
            return Err(Error::Config(
                "nn_grad_mode soft pairs with soft_min correspondences".into(),
            ));
        }
    }
    req.loss.weights.validate()?;
    match (req.wrt, mask) {
        (DiffTarget::MaskPixels, None) => Err(Error::Config(
            "mask_pixels differentiation needs a weight mask".into(),
        )),
        (DiffTarget::MaskPixels, Some(_)) => Ok(()),
        (_, Some(_)) => Err(Error::Config(
            "a weight mask is only meaningful with wrt: mask_pixels".into(),
        )),
        (_, None) => Ok(()),
    }
}

/// Prior weights the differentiated solve starts from: the mask samples when
/// differentiating mask pixels, otherwise the cloud's stored priors
/// (defaulting to 1).
fn base_priors(source: &Cloud2, req: &GradRequest, mask: Option<&WeightMask>) -> Vec<f64> {
    if req.wrt == DiffTarget::MaskPixels {
        return mask.expect("validated").sample_cloud(source);
    }
    match source.prior_weights() {
        Some(w) => w.to_vec(),
        None => vec![1.0; source.len()],
    }
}

/// Runs exactly `req.unroll_iterations` differentiable ICP steps and returns
/// the usual solve summary together with the loss gradient.
///
/// `mask` is required for (and only allowed with) `wrt: mask_pixels`; its
/// bilinear samples at the source points replace the cloud's prior weights,
/// and the returned gradient has one entry per mask pixel in row-major
/// order.
pub fn solve_with_grad(
    source: &Cloud2,
    target: &Cloud2,
    init: &Se2,
    cfg: &IcpConfig,
    req: &GradRequest,
    mask: Option<&WeightMask>,
) -> Result<(IcpResult, GradResult)> {
    validate_request(source, target, cfg, req, mask)?;
    let tree = KdTree::build(target.points())?;
    let priors = base_priors(source, req, mask);

    let tape = Tape::new();
    let lift = |v: f64| tape.var(v);
    let sx: Vec<Var<'_>> = source.points().iter().map(|p| tape.var(p[0])).collect();
    let sy: Vec<Var<'_>> = source.points().iter().map(|p| tape.var(p[1])).collect();
    let pw: Vec<Var<'_>> = priors.iter().map(|&w| tape.var(w)).collect();

    let run = unrolled_gd(
        &sx,
        &sy,
        &pw,
        target,
        &tree,
        init,
        cfg,
        req.unroll_iterations,
        &req.loss,
        &lift,
    )?;
    let grads = run.loss.backward();

    let gradient: Vec<f64> = match req.wrt {
        DiffTarget::PriorWeights => pw.iter().map(|v| grads.wrt(*v)).collect(),
        DiffTarget::SourcePoints => sx
            .iter()
            .zip(sy.iter())
            .flat_map(|(x, y)| [grads.wrt(*x), grads.wrt(*y)])
            .collect(),
        DiffTarget::MaskPixels => {
            // Chain rule through the bilinear sampler: each point's weight
            // adjoint lands on its four support pixels.
            let mask = mask.expect("validated");
            let mut pixels = vec![0.0; mask.values().len()];
            for (i, support) in mask.sample_jacobian(source).iter().enumerate() {
                let dw = grads.wrt(pw[i]);
                for k in 0..4 {
                    pixels[support.indices[k]] += support.coeffs[k] * dw;
                }
            }
            pixels
        }
    };

    let loss_value = run.loss.value();
    if !loss_value.is_finite() || gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical(
            "gradient solve produced a non-finite loss or gradient".into(),
        ));
    }

    let last_step = *run.step_norms.last().expect("unroll_iterations >= 1");
    let result = IcpResult {
        pose: Pose::Planar(run.pose.to_se2()),
        objective: *run.objectives.last().expect("final objective recorded"),
        iterations: req.unroll_iterations,
        converged: last_step < cfg.convergence_step_norm,
        step_norms: run.step_norms,
        objectives: run.objectives,
        correspondence_weights: run.final_weights,
        regularized: false,
    };
    Ok((
        result,
        GradResult {
            loss_value,
            gradient,
        },
    ))
}

/// Compares the taped gradient against central finite differences of the
/// same unrolled pipeline run on plain floats, perturbing each input entry
/// by `+/-h`. Relative error per entry is
/// `|analytic - numeric| / max(1e-12, |numeric|)`.
pub fn check_gradient(
    source: &Cloud2,
    target: &Cloud2,
    init: &Se2,
    cfg: &IcpConfig,
    req: &GradRequest,
    mask: Option<&WeightMask>,
    h: f64,
) -> Result<GradCheckReport> {
    if !h.is_finite() || h <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference step must be positive and finite, got {h}"
        )));
    }
    let (_, analytic) = solve_with_grad(source, target, init, cfg, req, mask)?;

    let tree = KdTree::build(target.points())?;
    let sx: Vec<f64> = source.points().iter().map(|p| p[0]).collect();
    let sy: Vec<f64> = source.points().iter().map(|p| p[1]).collect();
    let priors = base_priors(source, req, mask);

    let loss_at = |sx: &[f64], sy: &[f64], priors: &[f64]| -> Result<f64> {
        let run = unrolled_gd(
            sx,
            sy,
            priors,
            target,
            &tree,
            init,
            cfg,
            req.unroll_iterations,
            &req.loss,
            &|v| v,
        )?;
        Ok(run.loss)
    };

    let supports = match req.wrt {
        DiffTarget::MaskPixels => mask.expect("validated").sample_jacobian(source),
        _ => Vec::new(),
    };
    // Perturbing one mask pixel only moves the weights it supports, so the
    // samples are rebuilt from the raw pixel vector; this sidesteps the
    // [0, 1] bound a perturbed `WeightMask` could violate.
    let sample_pixels = |pixels: &[f64]| -> Vec<f64> {
        supports
            .iter()
            .map(|s| (0..4).map(|k| s.coeffs[k] * pixels[s.indices[k]]).sum())
            .collect()
    };

    let numeric_at = |k: usize, delta: f64| -> Result<f64> {
        match req.wrt {
            DiffTarget::PriorWeights => {
                let mut p = priors.clone();
                p[k] += delta;
                loss_at(&sx, &sy, &p)
            }
            DiffTarget::SourcePoints => {
                let mut x = sx.clone();
                let mut y = sy.clone();
                if k % 2 == 0 {
                    x[k / 2] += delta;
                } else {
                    y[k / 2] += delta;
                }
                loss_at(&x, &y, &priors)
            }
            DiffTarget::MaskPixels => {
                let mut pixels = mask.expect("validated").values().to_vec();
                pixels[k] += delta;
                loss_at(&sx, &sy, &sample_pixels(&pixels))
            }
        }
    };

    let mut entries = Vec::with_capacity(analytic.gradient.len());
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0;
    for (index, &g_analytic) in analytic.gradient.iter().enumerate() {
        let plus = numeric_at(index, h)?;
        let minus = numeric_at(index, -h)?;
        let numeric = (plus - minus) / (2.0 * h);
        let relative_error = (g_analytic - numeric).abs() / numeric.abs().max(1e-12);
        max_rel = max_rel.max(relative_error);
        sum_rel += relative_error;
        entries.push(GradCheckEntry {
            index,
            analytic: g_analytic,
            numeric,
            relative_error,
        });
    }
    let n = entries.len().max(1);
    Ok(GradCheckReport {
        loss_value: analytic.loss_value,
        entries,
        max_relative_error: max_rel,
        mean_relative_error: sum_rel / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{estimate_normals, PointCloud};
    use crate::icp::{ErrorModel, RobustLoss};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use nalgebra::Vector2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Jittered L-shaped wall sections plus a small post; irregular spacing
    /// keeps point-to-point correspondences off lattice local minima.
    fn scene(seed: u64) -> (Cloud2, Cloud2, Se2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        for i in 0..24 {
            pts.push(Vector2::new(
                i as f64 * 0.1 + rng.gen_range(-0.03..0.03),
                rng.gen_range(-0.01..0.01),
            ));
        }
        for j in 0..16 {
            pts.push(Vector2::new(
                rng.gen_range(-0.01..0.01),
                0.2 + j as f64 * 0.1 + rng.gen_range(-0.03..0.03),
            ));
        }
        for k in 0..8 {
            let a = k as f64 / 8.0 * std::f64::consts::TAU;
            pts.push(Vector2::new(1.4 + 0.1 * a.cos(), 0.9 + 0.1 * a.sin()));
        }
        let target = PointCloud::new(pts).unwrap();
        let truth = Se2::new(0.04, 0.08, -0.05);
        // Subsample after displacing so source points have no exact twins.
        let moved = target.transformed(&truth.inverse());
        let source_pts: Vec<_> = moved.points().iter().step_by(2).copied().collect();
        let n = source_pts.len();
        let source = PointCloud::new(source_pts)
            .unwrap()
            .with_prior_weights((0..n).map(|i| 0.4 + 0.05 * (i % 9) as f64).collect())
            .unwrap();
        (source, target, truth)
    }

    fn diff_cfg(nn_mode: NnMode, error_model: ErrorModel, robust_loss: RobustLoss) -> IcpConfig {
        IcpConfig {
            nn_mode,
            error_model,
            robust_loss,
            trim_distance: Some(5.0),
            // Meter-scale scene: the larger rate is stable here and keeps
            // the loss sensitive enough for well-conditioned differences.
            update_rule: UpdateRule::GradientDescent { step_size: 0.1 },
            ..IcpConfig::training()
        }
    }

    fn request(nn_grad_mode: NnGradMode, unroll: usize, reference: Se2) -> GradRequest {
        GradRequest {
            wrt: DiffTarget::PriorWeights,
            nn_grad_mode,
            unroll_iterations: unroll,
            loss: PoseErrorLoss {
                reference,
                weights: LossWeights::default(),
            },
        }
    }

    #[test]
    fn prior_weight_gradients_match_finite_differences_across_configurations() {
        let (source, target, truth) = scene(7);
        let target = estimate_normals(&target, 8).unwrap();
        for nn_mode in [NnMode::HardArgmin, NnMode::SoftMin { temperature: 0.05 }] {
            for error_model in [ErrorModel::PointToPoint, ErrorModel::PointToPlane] {
                for robust_loss in [
                    RobustLoss::None,
                    RobustLoss::Cauchy { k: 1.0 },
                    RobustLoss::Huber { delta: 0.5 },
                ] {
                    let cfg = diff_cfg(nn_mode, error_model, robust_loss);
                    let mode = match nn_mode {
                        NnMode::HardArgmin => NnGradMode::LocallyConstant,
                        NnMode::SoftMin { .. } => NnGradMode::Soft,
                    };
                    let req = request(mode, 3, truth);
                    let report =
                        check_gradient(&source, &target, &Se2::identity(), &cfg, &req, None, 1e-6)
                            .unwrap();
                    assert!(
                        report.max_relative_error < 1e-4,
                        "{nn_mode:?}/{error_model:?}/{robust_loss:?}: max rel err {}",
                        report.max_relative_error
                    );
                }
            }
        }
    }

    #[test]
    fn source_point_gradients_match_finite_differences() {
        let (source, target, truth) = scene(13);
        for (nn_mode, mode) in [
            (NnMode::HardArgmin, NnGradMode::LocallyConstant),
            (NnMode::SoftMin { temperature: 0.05 }, NnGradMode::Soft),
        ] {
            let cfg = diff_cfg(
                nn_mode,
                ErrorModel::PointToPoint,
                RobustLoss::Cauchy { k: 1.0 },
            );
            let mut req = request(mode, 3, truth);
            req.wrt = DiffTarget::SourcePoints;
            let report =
                check_gradient(&source, &target, &Se2::identity(), &cfg, &req, None, 1e-6).unwrap();
            assert_eq!(report.entries.len(), 2 * source.len());
            assert!(
                report.max_relative_error < 1e-4,
                "{nn_mode:?}: max rel err {}",
                report.max_relative_error
            );
        }
    }

    #[test]
    fn gradient_is_zero_at_a_perfect_minimum() {
        // Source equals target and the reference is the identity: every
        // residual is zero, so no input can improve the loss to first order.
        let (_, target, _) = scene(3);
        let source = target.clone();
        let cfg = diff_cfg(
            NnMode::HardArgmin,
            ErrorModel::PointToPoint,
            RobustLoss::None,
        );
        let req = request(NnGradMode::LocallyConstant, 4, Se2::identity());
        let (result, grad) =
            solve_with_grad(&source, &target, &Se2::identity(), &cfg, &req, None).unwrap();
        assert_eq!(grad.loss_value, 0.0);
        assert_eq!(result.objective, 0.0);
        for g in &grad.gradient {
            assert!(g.abs() < 1e-12, "gradient entry {g} at the minimum");
        }

        let mut req = req;
        req.wrt = DiffTarget::SourcePoints;
        let (_, grad) =
            solve_with_grad(&source, &target, &Se2::identity(), &cfg, &req, None).unwrap();
        for g in &grad.gradient {
            assert!(
                g.abs() < 1e-12,
                "coordinate gradient entry {g} at the minimum"
            );
        }
    }

    #[test]
    fn outlier_weight_gradient_is_positive() {
        // One source point far off the structure drags the estimate; the
        // loss must increase with its weight, and faster than with any
        // inlier's.
        let (source, target, truth) = scene(5);
        let mut pts = source.points().to_vec();
        let outlier_index = pts.len();
        pts.push(Vector2::new(4.0, 3.5));
        let source = PointCloud::new(pts).unwrap();
        let cfg = diff_cfg(
            NnMode::HardArgmin,
            ErrorModel::PointToPoint,
            RobustLoss::None,
        );
        let req = request(NnGradMode::LocallyConstant, 5, truth);
        let (_, grad) =
            solve_with_grad(&source, &target, &Se2::identity(), &cfg, &req, None).unwrap();
        let outlier = grad.gradient[outlier_index];
        let best_inlier = grad.gradient[..outlier_index]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(outlier > 0.0, "outlier weight gradient was {outlier}");
        assert!(
            outlier > best_inlier,
            "outlier gradient {outlier} not above inlier maximum {best_inlier}"
        );
    }

    #[test]
    fn soft_correspondences_at_tiny_temperature_match_hard_ones() {
        // On a well-separated target the softmax collapses onto the argmin
        // term, so values and gradients coincide with the hard path.
        let (source, target, truth) = scene(9);
        let hard_cfg = diff_cfg(
            NnMode::HardArgmin,
            ErrorModel::PointToPoint,
            RobustLoss::Cauchy { k: 1.0 },
        );
        let soft_cfg = diff_cfg(
            NnMode::SoftMin { temperature: 1e-8 },
            ErrorModel::PointToPoint,
            RobustLoss::Cauchy { k: 1.0 },
        );
        let hard_req = request(NnGradMode::LocallyConstant, 3, truth);
        let soft_req = request(NnGradMode::Soft, 3, truth);
        let (hard_res, hard) = solve_with_grad(
            &source,
            &target,
            &Se2::identity(),
            &hard_cfg,
            &hard_req,
            None,
        )
        .unwrap();
        let (soft_res, soft) = solve_with_grad(
            &source,
            &target,
            &Se2::identity(),
            &soft_cfg,
            &soft_req,
            None,
        )
        .unwrap();
        assert_abs_diff_eq!(hard.loss_value, soft.loss_value, epsilon = 1e-12);
        assert_abs_diff_eq!(hard_res.objective, soft_res.objective, epsilon = 1e-12);
        for (a, b) in hard.gradient.iter().zip(soft.gradient.iter()) {
            assert!((a - b).abs() < 1e-5, "hard {a} vs soft {b}");
        }
    }

    #[test]
    fn soft_correspondences_at_moderate_temperature_differ_but_align() {
        let (source, target, truth) = scene(9);
        let hard_cfg = diff_cfg(
            NnMode::HardArgmin,
            ErrorModel::PointToPoint,
            RobustLoss::None,
        );
        let soft_cfg = diff_cfg(
            NnMode::SoftMin { temperature: 0.02 },
            ErrorModel::PointToPoint,
            RobustLoss::None,
        );
        let (_, hard) = solve_with_grad(
            &source,
            &target,
            &Se2::identity(),
            &hard_cfg,
            &request(NnGradMode::LocallyConstant, 3, truth),
            None,
        )
        .unwrap();
        let (_, soft) = solve_with_grad(
            &source,
            &target,
            &Se2::identity(),
            &soft_cfg,
            &request(NnGradMode::Soft, 3, truth),
            None,
        )
        .unwrap();
        let diff: f64 = hard
            .gradient
            .iter()
            .zip(soft.gradient.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(
            diff > 1e-6,
            "blending should move the gradient, moved {diff}"
        );
        let dot: f64 = hard
            .gradient
            .iter()
            .zip(soft.gradient.iter())
            .map(|(a, b)| a * b)
            .sum();
        assert!(dot > 0.0, "gradients should stay aligned, dot {dot}");
    }

    fn small_mask() -> WeightMask {
        let width = 6;
        let values: Vec<f64> = (0..width * width)
            .map(|i| 0.2 + 0.6 * ((i * 37) % 97) as f64 / 97.0)
            .collect();
        WeightMask::new(values, width, 0.5).unwrap()
    }

    #[test]
    fn mask_pixel_gradient_is_the_prior_gradient_through_the_sampler() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts: Vec<Vector2<f64>> = (0..14)
            .map(|_| Vector2::new(rng.gen_range(-1.1..1.1), rng.gen_range(-1.1..1.1)))
            .collect();
        let target = PointCloud::new(pts).unwrap();
        let truth = Se2::new(0.03, 0.05, -0.04);
        let source = target.transformed(&truth.inverse());
        let mask = small_mask();
        let cfg = diff_cfg(
            NnMode::HardArgmin,
            ErrorModel::PointToPoint,
            RobustLoss::Cauchy { k: 1.0 },
        );

        let mut mask_req = request(NnGradMode::LocallyConstant, 2, truth);
        mask_req.wrt = DiffTarget::MaskPixels;
        let (_, by_pixels) = solve_with_grad(
            &source,
            &target,
            &Se2::identity(),
            &cfg,
            &mask_req,
            Some(&mask),
        )
        .unwrap();
        assert_eq!(by_pixels.gradient.len(), mask.values().len());

        // The same solve differentiated per prior weight, chained by hand
        // through the bilinear support, must reproduce it exactly.
        let sampled = mask.sample_cloud(&source);
        let weighted = source.clone().with_prior_weights(sampled).unwrap();
        let prior_req = request(NnGradMode::LocallyConstant, 2, truth);
        let (_, by_priors) =
            solve_with_grad(&weighted, &target, &Se2::identity(), &cfg, &prior_req, None).unwrap();
        let mut composed = vec![0.0; mask.values().len()];
        for (i, support) in mask.sample_jacobian(&source).iter().enumerate() {
            for k in 0..4 {
                composed[support.indices[k]] += support.coeffs[k] * by_priors.gradient[i];
            }
        }
        for (a, b) in by_pixels.gradient.iter().zip(composed.iter()) {
            assert!((a - b).abs() < 1e-9, "pixel gradient {a} vs composed {b}");
        }

        // And the pixel gradient stands up to finite differences on its own.
        let report = check_gradient(
            &source,
            &target,
            &Se2::identity(),
            &cfg,
            &mask_req,
            Some(&mask),
            1e-6,
        )
        .unwrap();
        assert!(
            report.max_relative_error < 1e-4,
            "max rel err {}",
            report.max_relative_error
        );
    }

    #[test]
    fn smooth_trim_gate_slope_at_the_boundary_is_half_the_steepness() {
        let trim = 5.0;
        let steepness = 10.0;
        let tape = Tape::new();
        let d = tape.var(trim);
        let gate = (-((d - trim) * steepness).tanh() + 1.0) * 0.5;
        let slope = gate.backward().wrt(d);
        assert_relative_eq!(slope, -steepness / 2.0, epsilon = 1e-12);

        let cfg = IcpConfig {
            trim_distance: Some(trim),
            trim_steepness: steepness,
            differentiable: true,
            ..IcpConfig::default()
        };
        let h = 1e-7;
        let fd = (crate::icp::trim_gate(trim + h, &cfg) - crate::icp::trim_gate(trim - h, &cfg))
            / (2.0 * h);
        assert_abs_diff_eq!(slope, fd, epsilon = 1e-6);
    }

    #[test]
    fn solve_summary_matches_the_reference_solver() {
        let (source, target, truth) = scene(17);
        let cfg = IcpConfig {
            convergence_step_norm: 1e-300,
            max_iterations: 3,
            ..diff_cfg(
                NnMode::HardArgmin,
                ErrorModel::PointToPoint,
                RobustLoss::Cauchy { k: 1.0 },
            )
        };
        let req = request(NnGradMode::LocallyConstant, 3, truth);
        let (result, _) =
            solve_with_grad(&source, &target, &Se2::identity(), &cfg, &req, None).unwrap();
        let reference = crate::icp::icp_solve_2d(&source, &target, &Se2::identity(), &cfg).unwrap();

        let pose = match result.pose {
            Pose::Planar(p) => p,
            _ => unreachable!(),
        };
        let ref_pose = match reference.pose {
            Pose::Planar(p) => p,
            _ => unreachable!(),
        };
        assert_eq!(result.iterations, 3);
        assert!(!result.converged);
        assert!(!result.regularized);
        assert_eq!(result.step_norms.len(), 3);
        assert_eq!(result.objectives.len(), 4);
        assert_abs_diff_eq!(pose.angle(), ref_pose.angle(), epsilon = 1e-10);
        assert_abs_diff_eq!(
            pose.translation()[0],
            ref_pose.translation()[0],
            epsilon = 1e-10
        );
        assert_abs_diff_eq!(
            pose.translation()[1],
            ref_pose.translation()[1],
            epsilon = 1e-10
        );
        assert_abs_diff_eq!(result.objective, reference.objective, epsilon = 1e-10);
    }

    #[test]
    fn requests_outside_the_contract_are_rejected() {
        let (source, target, truth) = scene(1);
        let cfg = diff_cfg(
            NnMode::HardArgmin,
            ErrorModel::PointToPoint,
            RobustLoss::None,
        );
        let ok = request(NnGradMode::LocallyConstant, 3, truth);
        let run = |cfg: &IcpConfig, req: &GradRequest, mask: Option<&WeightMask>| {
            solve_with_grad(&source, &target, &Se2::identity(), cfg, req, mask).err()
        };

        let mut req = ok;
        req.unroll_iterations = 0;
        assert!(matches!(run(&cfg, &req, None), Some(Error::Config(_))));
        req.unroll_iterations = MAX_UNROLL_ITERATIONS + 1;
        assert!(matches!(run(&cfg, &req, None), Some(Error::Config(_))));

        // Correspondence mode and gradient mode must agree.
        let mut req = ok;
        req.nn_grad_mode = NnGradMode::Soft;
        assert!(matches!(run(&cfg, &req, None), Some(Error::Config(_))));
        let soft_cfg = diff_cfg(
            NnMode::SoftMin { temperature: 0.05 },
            ErrorModel::PointToPoint,
            RobustLoss::None,
        );
        assert!(matches!(run(&soft_cfg, &ok, None), Some(Error::Config(_))));

        // The smooth, gradient-descent surface is mandatory.
        let mut plain = cfg;
        plain.differentiable = false;
        assert!(matches!(run(&plain, &ok, None), Some(Error::Config(_))));
        let mut newton = cfg;
        newton.update_rule = UpdateRule::GaussNewton;
        assert!(matches!(run(&newton, &ok, None), Some(Error::Config(_))));

        // Mask presence must match the differentiation target.
        let mask = small_mask();
        assert!(matches!(
            run(&cfg, &ok, Some(&mask)),
            Some(Error::Config(_))
        ));
        let mut req = ok;
        req.wrt = DiffTarget::MaskPixels;
        assert!(matches!(run(&cfg, &req, None), Some(Error::Config(_))));

        // Step size for the finite-difference oracle must be usable.
        let bad = check_gradient(&source, &target, &Se2::identity(), &cfg, &ok, None, 0.0);
        assert!(matches!(bad, Err(Error::Config(_))));
    }

    #[test]
    fn zero_priors_surface_as_no_effective_correspondences() {
        let (source, target, truth) = scene(1);
        let n = source.len();
        let source = source.with_prior_weights(vec![0.0; n]).unwrap();
        let cfg = diff_cfg(
            NnMode::HardArgmin,
            ErrorModel::PointToPoint,
            RobustLoss::None,
        );
        let req = request(NnGradMode::LocallyConstant, 3, truth);
        let err = solve_with_grad(&source, &target, &Se2::identity(), &cfg, &req, None)
            .err()
            .unwrap();
        assert!(matches!(
            err,
            Error::NoEffectiveCorrespondences { iteration: 0 }
        ));
    }

    #[test]
    fn single_point_gradient_check_reports_each_entry() {
        let source = PointCloud::new(vec![Vector2::new(0.3, -0.2)]).unwrap();
        let target = PointCloud::new(vec![Vector2::new(0.5, 0.1)]).unwrap();
        let cfg = diff_cfg(
            NnMode::HardArgmin,
            ErrorModel::PointToPoint,
            RobustLoss::None,
        );
        let mut req = request(NnGradMode::LocallyConstant, 1, Se2::identity());
        req.wrt = DiffTarget::SourcePoints;
        let report =
            check_gradient(&source, &target, &Se2::identity(), &cfg, &req, None, 1e-6).unwrap();
        assert_eq!(report.entries.len(), 2);
        assert!(report.loss_value.is_finite());
        assert!(report.max_relative_error < 1e-6);
        let mean = report.entries.iter().map(|e| e.relative_error).sum::<f64>() / 2.0;
        assert_abs_diff_eq!(report.mean_relative_error, mean, epsilon = 1e-15);
    }

    #[test]
    fn request_serialization_roundtrips_and_fills_defaults() {
        let req = GradRequest {
            wrt: DiffTarget::SourcePoints,
            nn_grad_mode: NnGradMode::Soft,
            unroll_iterations: 7,
            loss: PoseErrorLoss {
                reference: Se2::new(0.2, 1.0, -0.5),
                weights: LossWeights {
                    alpha: 2.0,
                    beta: 0.5,
                    gamma: 1.0,
                },
            },
        };
        let json = serde_json::to_string(&req).unwrap();
        let back: GradRequest = serde_json::from_str(&json).unwrap();
        assert_eq!(back.wrt, req.wrt);
        assert_eq!(back.nn_grad_mode, req.nn_grad_mode);
        assert_eq!(back.unroll_iterations, 7);
        assert_abs_diff_eq!(back.loss.reference.angle(), 0.2, epsilon = 1e-15);
        assert_eq!(back.loss.weights, req.loss.weights);

        let partial: GradRequest = serde_json::from_str(r#"{"wrt":"mask_pixels"}"#).unwrap();
        assert_eq!(partial.wrt, DiffTarget::MaskPixels);
        assert_eq!(partial.nn_grad_mode, NnGradMode::LocallyConstant);
        assert_eq!(partial.unroll_iterations, 10);
        assert_eq!(partial.loss.reference, Se2::identity());
    }
}
