//! Per-scene weight-mask training and registration evaluation.
//!
//! The mask is parameterized as one logit per pixel; its sigmoid is a valid
//! weight mask at every step. Each epoch runs the differentiable solver with
//! mask-sampled weights, adds a binary cross-entropy pull toward the map
//! supervision mask, and backpropagates the composite loss into the logits.
//! Updates only apply when the registration itself was trustworthy (small
//! final step, small pose error); everything else is skipped so bad epochs
//! cannot poison the mask.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{estimate_normals, Cloud2};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Se2};
use crate::grad::{
    solve_with_grad, DiffTarget, GradRequest, NnGradMode, PoseErrorLoss, MAX_UNROLL_ITERATIONS,
};
use crate::icp::{icp_solve_2d, ErrorModel, IcpConfig, RobustLoss};
use crate::mask::{bce_grad, bce_loss, make_map_mask, total_loss, LossWeights, WeightMask};
use crate::radar::{detect, DetectorConfig, PolarScan};
use crate::scene::GeneratedScene;

/// Neighbors used when a point-to-plane config needs target normals.
const NORMAL_NEIGHBORS: usize = 8;
/// "Accurate" translation bound, meters.
pub const ACCURATE_TRANSLATION_M: f64 = 0.05;
/// "Accurate" heading bound, radians (one degree).
pub const ACCURATE_HEADING_RAD: f64 = std::f64::consts::PI / 180.0;

/// One registration problem: a scan, the points extracted from it, the map
/// to register against, and the transform that aligns scan to map.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub scan: PolarScan,
    pub source: Cloud2,
    pub map: Cloud2,
    pub ground_truth: Se2,
}

impl TrainSample {
    /// Runs the detector over the scene's scan to produce the source cloud.
    pub fn from_scene(scene: &GeneratedScene, detector: &DetectorConfig) -> Result<TrainSample> {
        let source = detect(&scene.scan, detector)?;
        let sample = TrainSample {
            scan: scene.scan.clone(),
            source,
            map: scene.map.clone(),
            ground_truth: scene.ground_truth,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<()> {
        if self.source.is_empty() {
            return Err(Error::Data("training sample has no source points".into()));
        }
        if self.map.is_empty() {
            return Err(Error::Data("training sample has an empty map".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    AdaptiveMoments {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::AdaptiveMoments {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Solver iterations differentiated through per epoch.
    pub unroll_iterations: usize,
    /// An epoch's update applies only if the final solver step norm is below
    /// this...
    pub good_step_threshold: f64,
    /// ...and the pose error twist norm (mixed meters/radians) is below this.
    pub good_error_threshold: f64,
    /// Rotate scan points and map jointly by a fresh uniform angle each
    /// epoch.
    pub augment_rotation: bool,
    pub loss_weights: LossWeights,
    pub optimizer: Optimizer,
    pub mask_width: usize,
    pub mask_pixel_size: f64,
    pub icp: IcpConfig,
    pub nn_grad_mode: NnGradMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            epochs: 200,
            unroll_iterations: 10,
            good_step_threshold: 0.01,
            good_error_threshold: 0.4,
            augment_rotation: false,
            loss_weights: LossWeights::default(),
            optimizer: Optimizer::default(),
            mask_width: 256,
            mask_pixel_size: 0.125,
            icp: IcpConfig {
                robust_loss: RobustLoss::Cauchy { k: 1.0 },
                trim_distance: Some(5.0),
                ..IcpConfig::training()
            },
            nn_grad_mode: NnGradMode::LocallyConstant,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, v: f64) -> Result<()> {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
            Ok(())
        }
        positive("learning_rate", self.learning_rate)?;
        positive("good_step_threshold", self.good_step_threshold)?;
        positive("good_error_threshold", self.good_error_threshold)?;
        positive("mask_pixel_size", self.mask_pixel_size)?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.unroll_iterations == 0 || self.unroll_iterations > MAX_UNROLL_ITERATIONS {
            return Err(Error::Config(format!(
                "unroll_iterations must be in 1..={MAX_UNROLL_ITERATIONS}, got {}",
                self.unroll_iterations
            )));
        }
        if self.mask_width < 2 {
            return Err(Error::Config(format!(
                "mask_width must be at least 2, got {}",
                self.mask_width
            )));
        }
        self.loss_weights.validate()?;
        if let Optimizer::AdaptiveMoments {
            beta1,
            beta2,
            epsilon,
        } = self.optimizer
        {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                return Err(Error::Config(format!(
                    "adaptive_moments betas must lie in [0, 1), got {beta1} and {beta2}"
                )));
            }
            positive("adaptive_moments epsilon", epsilon)?;
        }
        self.icp.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_icp: f64,
    pub l_bce: f64,
    pub total: f64,
    /// True when the good-sample filter rejected the epoch and the logits
    /// were left untouched.
    pub skipped: bool,
}

pub struct TrainOutcome {
    /// Sigmoid of the final logits, scaled so the brightest pixel is 1.
    pub mask: WeightMask,
    pub trace: Vec<EpochRecord>,
    /// Every epoch was skipped; the mask is the (normalized) initial one.
    pub all_skipped: bool,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Target-side preparation: point-to-plane configs need normals.
fn prepare_target(cloud: &Cloud2, cfg: &IcpConfig) -> Result<Cloud2> {
    if matches!(cfg.error_model, ErrorModel::PointToPlane) && cloud.normals().is_none() {
        estimate_normals(cloud, NORMAL_NEIGHBORS)
    } else {
        Ok(cloud.clone())
    }
}

/// Pose-error twist norm of a planar result, or `None` when the pose sits on
/// the log cut locus (treated as a failed epoch, not an error).
fn pose_error_norm(pose: &Pose) -> Option<f64> {
    match pose {
        Pose::Planar(t) => t.log().ok().map(|e| e.norm()),
        Pose::Spatial(_) => None,
    }
}

pub fn train_mask(sample: &TrainSample, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    sample.validate()?;
    let width = cfg.mask_width;
    let pixels = width * width;
    let pixel_size = cfg.mask_pixel_size;
    // Supervision keeps every map point that can land on the grid at all.
    let max_range = width as f64 * pixel_size / 2.0 * std::f64::consts::SQRT_2;
    let map_to_sensor = sample.ground_truth.inverse();
    let aligned_map = prepare_target(&sample.map.transformed(&map_to_sensor), &cfg.icp)?;
    let static_supervision = if cfg.augment_rotation {
        None
    } else {
        Some(make_map_mask(
            &sample.map,
            &map_to_sensor,
            width,
            pixel_size,
            max_range,
        )?)
    };
    let request = GradRequest {
        wrt: DiffTarget::MaskPixels,
        nn_grad_mode: cfg.nn_grad_mode,
        unroll_iterations: cfg.unroll_iterations,
        loss: PoseErrorLoss {
            reference: Se2::identity(),
            weights: cfg.loss_weights,
        },
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut logits = vec![0.0_f64; pixels];
    let mut moment1 = vec![0.0_f64; pixels];
    let mut moment2 = vec![0.0_f64; pixels];
    let mut applied_steps = 0u32;
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let (source, target, supervision);
        let (src, tgt, sup) = if cfg.augment_rotation {
            let aug = Se2::new(rng.gen_range(0.0..std::f64::consts::TAU), 0.0, 0.0);
            source = sample.source.transformed(&aug);
            target = aligned_map.transformed(&aug);
            supervision = make_map_mask(
                &sample.map,
                &aug.compose(&map_to_sensor),
                width,
                pixel_size,
                max_range,
            )?;
            (&source, &target, &supervision)
        } else {
            (
                &sample.source,
                &aligned_map,
                static_supervision.as_ref().expect("computed above"),
            )
        };

        let mask = WeightMask::new(
            logits.iter().map(|&l| sigmoid(l)).collect(),
            width,
            pixel_size,
        )?;
        let (solved, grad) =
            solve_with_grad(src, tgt, &Se2::identity(), &cfg.icp, &request, Some(&mask))?;
        let l_bce = bce_loss(&mask, sup)?;
        let breakdown = total_loss(grad.loss_value, l_bce, &cfg.loss_weights);

        let final_step = solved.step_norms.last().copied().unwrap_or(f64::INFINITY);
        let good = final_step < cfg.good_step_threshold
            && pose_error_norm(&solved.pose)
                .map(|e| e < cfg.good_error_threshold)
                .unwrap_or(false);

        if good {
            let bce_g = bce_grad(&mask, sup)?;
            applied_steps += 1;
            let gamma = cfg.loss_weights.gamma;
            let lr = cfg.learning_rate;
            for i in 0..pixels {
                let m = mask.values()[i];
                let g = (grad.gradient[i] + gamma * bce_g[i]) * (m * (1.0 - m));
                match cfg.optimizer {
                    Optimizer::Sgd => logits[i] -= lr * g,
                    Optimizer::AdaptiveMoments {
                        beta1,
                        beta2,
                        epsilon,
                    } => {
                        moment1[i] = beta1 * moment1[i] + (1.0 - beta1) * g;
                        moment2[i] = beta2 * moment2[i] + (1.0 - beta2) * g * g;
                        let m_hat = moment1[i] / (1.0 - beta1.powi(applied_steps as i32));
                        let v_hat = moment2[i] / (1.0 - beta2.powi(applied_steps as i32));
                        logits[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
                    }
                }
            }
        }
        trace.push(EpochRecord {
            epoch,
            l_icp: breakdown.l_icp,
            l_bce: breakdown.l_bce,
            total: breakdown.total,
            skipped: !good,
        });
    }

    let all_skipped = trace.iter().all(|r| r.skipped);
    let mask = WeightMask::new(
        logits.iter().map(|&l| sigmoid(l)).collect(),
        width,
        pixel_size,
    )?
    .normalized();
    Ok(TrainOutcome {
        mask,
        trace,
        all_skipped,
    })
}

/// Writes the per-epoch loss trace as CSV.
pub fn write_trace_csv(trace: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,l_icp,l_bce,total,skipped\n");
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.l_icp, r.l_bce, r.total, r.skipped as u8
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// How initial-guess offsets are drawn at a given noise scale.
///
/// `Uniform` draws each component from `[-bound, bound]`; `Normal` reuses
/// the same bounds as standard deviations instead. The translation bound is
/// `0.5 sigma` meters per axis, the heading bound `2.5 sigma` degrees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitDistribution {
    #[default]
    Uniform,
    Normal,
}

impl FromStr for InitDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(InitDistribution::Uniform),
            "normal" => Ok(InitDistribution::Normal),
            other => Err(Error::Config(format!(
                "unknown initial-guess distribution {other:?} (expected uniform or normal)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Unweighted,
    Weighted,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Unweighted => "unweighted",
            EvalMode::Weighted => "weighted",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unweighted" => Ok(EvalMode::Unweighted),
            "weighted" => Ok(EvalMode::Weighted),
            other => Err(Error::Data(format!("unknown evaluation mode {other:?}"))),
        }
    }
}

/// One registration trial. Error components are the pose-error twist
/// (longitudinal, lateral in meters; heading in radians); failed or
/// non-converged solves carry NaN errors and never count toward RMSE.
#[derive(Clone, Copy, Debug)]
pub struct RunRecord {
    pub sample: usize,
    pub trial: usize,
    pub sigma: f64,
    pub mode: EvalMode,
    pub e_long: f64,
    pub e_lat: f64,
    pub e_head: f64,
    pub converged: bool,
    pub accurate: bool,
}

/// Aggregate metrics for one mode: RMSE over converged runs (NaN when none
/// converged), percentages in [0, 100]. Accuracy is measured among converged
/// runs; with zero converged runs it reports 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ModeSummary {
    pub rmse_long: f64,
    pub rmse_lat: f64,
    pub rmse_head_deg: f64,
    pub converged_pct: f64,
    pub accurate_pct: f64,
}

/// The single aggregation path: every summary in the crate (evaluation,
/// reports, recomputation from emitted records) goes through here.
pub fn summarize<'a>(records: impl IntoIterator<Item = &'a RunRecord>) -> ModeSummary {
    let mut total = 0usize;
    let mut converged = 0usize;
    let mut accurate = 0usize;
    let (mut sq_long, mut sq_lat, mut sq_head) = (0.0, 0.0, 0.0);
    for r in records {
        total += 1;
        if r.converged {
            converged += 1;
            sq_long += r.e_long * r.e_long;
            sq_lat += r.e_lat * r.e_lat;
            sq_head += r.e_head * r.e_head;
            if r.accurate {
                accurate += 1;
            }
        }
    }
    let rmse = |sq: f64| (sq / converged as f64).sqrt();
    let deg = 180.0 / std::f64::consts::PI;
    ModeSummary {
        rmse_long: rmse(sq_long),
        rmse_lat: rmse(sq_lat),
        rmse_head_deg: rmse(sq_head) * deg,
        converged_pct: 100.0 * converged as f64 / total as f64,
        accurate_pct: if converged == 0 {
            0.0
        } else {
            100.0 * accurate as f64 / converged as f64
        },
    }
}

pub struct EvalMetrics {
    pub unweighted: ModeSummary,
    /// Present when a mask was supplied.
    pub weighted: Option<ModeSummary>,
    pub records: Vec<RunRecord>,
}

/// A sample readied for trials: target aligned into the scan frame (so the
/// true pose is the identity), plus an optional mask-weighted source copy.
pub(crate) struct PreparedSample {
    source: Cloud2,
    weighted: Option<Cloud2>,
    target: Cloud2,
}

pub(crate) fn prepare_eval_sample(
    sample: &TrainSample,
    mask: Option<&WeightMask>,
    cfg: &IcpConfig,
) -> Result<PreparedSample> {
    sample.validate()?;
    let target = prepare_target(&sample.map.transformed(&sample.ground_truth.inverse()), cfg)?;
    let weighted = mask
        .map(|m| {
            sample
                .source
                .clone()
                .with_prior_weights(m.sample_cloud(&sample.source))
        })
        .transpose()?;
    Ok(PreparedSample {
        source: sample.source.clone(),
        weighted,
        target,
    })
}

fn run_one(
    source: &Cloud2,
    target: &Cloud2,
    init: &Se2,
    cfg: &IcpConfig,
) -> (bool, f64, f64, f64, bool) {
    let failed = (false, f64::NAN, f64::NAN, f64::NAN, false);
    let Ok(result) = icp_solve_2d(source, target, init, cfg) else {
        return failed;
    };
    let Pose::Planar(pose) = result.pose else {
        return failed;
    };
    let Ok(e) = pose.log() else {
        return failed;
    };
    let accurate = result.converged
        && e.xy().norm() <= ACCURATE_TRANSLATION_M
        && e[2].abs() <= ACCURATE_HEADING_RAD;
    (result.converged, e[0], e[1], e[2], accurate)
}

/// Runs the (sample x trial) grid in parallel with one RNG stream per pair,
/// so results are identical regardless of thread count. Both modes of a pair
/// share the drawn initial guess.
pub(crate) fn run_grid(
    prepared: &[PreparedSample],
    sigma: f64,
    trials: usize,
    cfg: &IcpConfig,
    seed: u64,
    dist: InitDistribution,
) -> Vec<RunRecord> {
    let tasks: Vec<(usize, usize)> = (0..prepared.len())
        .flat_map(|s| (0..trials).map(move |t| (s, t)))
        .collect();
    tasks
        .into_par_iter()
        .map(|(s, t)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((s as u64) << 32) | t as u64);
            let init = if sigma > 0.0 {
                let bt = 0.5 * sigma;
                let br = 2.5 * sigma * std::f64::consts::PI / 180.0;
                let (dx, dy, dphi) = match dist {
                    InitDistribution::Uniform => (
                        rng.gen_range(-bt..=bt),
                        rng.gen_range(-bt..=bt),
                        rng.gen_range(-br..=br),
                    ),
                    InitDistribution::Normal => {
                        let mut gauss = || rng.sample::<f64, _>(rand_distr::StandardNormal);
                        (bt * gauss(), bt * gauss(), br * gauss())
                    }
                };
                Se2::new(dphi, dx, dy)
            } else {
                Se2::identity()
            };
            let p = &prepared[s];
            let mut out = Vec::with_capacity(2);
            let record = |mode, run: (bool, f64, f64, f64, bool)| RunRecord {
                sample: s,
                trial: t,
                sigma,
                mode,
                converged: run.0,
                e_long: run.1,
                e_lat: run.2,
                e_head: run.3,
                accurate: run.4,
            };
            out.push(record(
                EvalMode::Unweighted,
                run_one(&p.source, &p.target, &init, cfg),
            ));
            if let Some(weighted) = &p.weighted {
                out.push(record(
                    EvalMode::Weighted,
                    run_one(weighted, &p.target, &init, cfg),
                ));
            }
            out
        })
        .flatten()
        .collect()
}

/// Registration quality of a mask over samples at one noise scale: `trials`
/// initial guesses per sample, drawn uniformly within `±0.5·sigma` meters
/// per translation axis and `±2.5·sigma` degrees of heading, solved both
/// unweighted and (when a mask is given) with mask-sampled prior weights.
pub fn evaluate_mask(
    mask: Option<&WeightMask>,
    samples: &[TrainSample],
    sigma: f64,
    trials: usize,
    cfg: &IcpConfig,
    seed: u64,
) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation needs at least one sample".into()));
    }
    if trials == 0 {
        return Err(Error::Config("evaluation needs at least one trial".into()));
    }
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::Config(format!(
            "noise scale must be nonnegative, got {sigma}"
        )));
    }
    if cfg.differentiable {
        return Err(Error::Config(
            "evaluation uses the plain solver; disable differentiable mode".into(),
        ));
    }
    cfg.validate()?;
    let prepared: Vec<PreparedSample> = samples
        .iter()
        .map(|s| prepare_eval_sample(s, mask, cfg))
        .collect::<Result<_>>()?;
    let records = run_grid(
        &prepared,
        sigma,
        trials,
        cfg,
        seed,
        InitDistribution::Uniform,
    );
    let unweighted = summarize(records.iter().filter(|r| r.mode == EvalMode::Unweighted));
    let weighted = mask
        .is_some()
        .then(|| summarize(records.iter().filter(|r| r.mode == EvalMode::Weighted)));
    Ok(EvalMetrics {
        unweighted,
        weighted,
        records,
    })
}
