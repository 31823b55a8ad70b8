//! Unrolled gradient-descent ICP over a generic scalar.
//!
//! This is the same iteration as the solver's gradient-descent path, written
//! against [`Real`] so one body serves both the reverse-mode tape and the
//! plain-`f64` pipeline the finite-difference oracle perturbs. It is planar
//! only and supports only the smooth configuration surface (gradient-descent
//! updates, tanh trim gate, Cauchy or pseudo-Huber weights); the public entry
//! point validates those requirements before calling in.

use nalgebra::Vector2;

use crate::cloud::{Cloud2, KdTree};
use crate::error::{Error, Result};
use crate::geometry::{Se2, PI_TOLERANCE, TAYLOR_THRESHOLD_2D};
use crate::grad::scalar::Real;
use crate::grad::PoseErrorLoss;
use crate::icp::{ErrorModel, IcpConfig, NnMode, RobustLoss, UpdateRule};

/// Planar rigid transform carried as `(theta, tx, ty)` so the rotation stays
/// a single differentiable scalar. Valid while the accumulated angle is away
/// from +/-pi, which `log` checks.
#[derive(Clone, Copy, Debug)]
pub(crate) struct GSe2<S: Real> {
    pub theta: S,
    pub tx: S,
    pub ty: S,
}

/// Left-Jacobian coefficients (sin(t)/t, (1-cos(t))/t) with the same Taylor
/// switch as the plain transform type.
fn jacobian_coeffs<S: Real>(theta: S) -> (S, S) {
    if theta.value().abs() < TAYLOR_THRESHOLD_2D {
        let t2 = theta * theta;
        let a = t2 * t2 / 120.0 - t2 / 6.0 + 1.0;
        let b = theta * (t2 * t2 / 720.0 - t2 / 24.0 + 0.5);
        (a, b)
    } else {
        let a = theta.sin() / theta;
        let b = (-theta.cos() + 1.0) / theta;
        (a, b)
    }
}

impl<S: Real> GSe2<S> {
    pub fn from_se2(t: &Se2, lift: &impl Fn(f64) -> S) -> Self {
        let tr = t.translation();
        GSe2 {
            theta: lift(t.angle()),
            tx: lift(tr[0]),
            ty: lift(tr[1]),
        }
    }

    pub fn exp(xi: &[S; 3]) -> Self {
        let theta = xi[2];
        let (a, b) = jacobian_coeffs(theta);
        GSe2 {
            theta,
            tx: a * xi[0] - b * xi[1],
            ty: b * xi[0] + a * xi[1],
        }
    }

    pub fn log(&self) -> Result<[S; 3]> {
        let theta = self.theta;
        if theta.value().abs() >= std::f64::consts::PI - PI_TOLERANCE {
            return Err(Error::LogSingularity {
                angle: theta.value(),
            });
        }
        let (a, b) = jacobian_coeffs(theta);
        let det = a * a + b * b;
        Ok([
            (a * self.tx + b * self.ty) / det,
            (-b * self.tx + a * self.ty) / det,
            theta,
        ])
    }

    pub fn compose(&self, other: &GSe2<S>) -> GSe2<S> {
        let c = self.theta.cos();
        let s = self.theta.sin();
        GSe2 {
            theta: self.theta + other.theta,
            tx: c * other.tx - s * other.ty + self.tx,
            ty: s * other.tx + c * other.ty + self.ty,
        }
    }

    pub fn to_se2(&self) -> Se2 {
        Se2::new(self.theta.value(), self.tx.value(), self.ty.value())
    }
}

struct AssembleG<S: Real> {
    objective: S,
    weight_sum: S,
    grad: [S; 3],
    weights: Vec<f64>,
}

/// One correspondence-and-weighting pass at a fixed pose, accumulating the
/// objective and its twist gradient. Mirrors the solver's assembly; the only
/// structural difference is that zero-weight terms are accumulated instead of
/// skipped, which adds exact zeros to the forward values while keeping the
/// dependence of the weight on its inputs (a prior at 0 still has a nonzero
/// derivative through it).
#[allow(clippy::too_many_arguments)]
fn assemble_g<S: Real>(
    source_x: &[S],
    source_y: &[S],
    priors: &[S],
    target: &Cloud2,
    tree: &KdTree<2>,
    pose: &GSe2<S>,
    cfg: &IcpConfig,
    lift: &impl Fn(f64) -> S,
) -> AssembleG<S> {
    let tpts = target.points();
    let tnormals = target.normals();
    let plane = cfg.error_model == ErrorModel::PointToPlane;

    let zero = lift(0.0);
    let mut out = AssembleG {
        objective: zero,
        weight_sum: zero,
        grad: [zero, zero, zero],
        weights: Vec::with_capacity(source_x.len()),
    };

    let c = pose.theta.cos();
    let s = pose.theta.sin();

    for i in 0..source_x.len() {
        let px = c * source_x[i] - s * source_y[i] + pose.tx;
        let py = s * source_x[i] + c * source_y[i] + pose.ty;

        // Correspondence: (qx, qy), blended normal, and whether a usable
        // normal exists. Hard argmin fixes the index from the current values,
        // so the match is locally constant under differentiation.
        let (qx, qy, nx, ny, has_normal) = match cfg.nn_mode {
            NnMode::HardArgmin => {
                let (j, _) = tree.nearest(&Vector2::new(px.value(), py.value()));
                let (nx, ny, valid) = match tnormals {
                    Some(ns) => (lift(ns[j][0]), lift(ns[j][1]), ns[j].norm_squared() > 0.0),
                    None => (zero, zero, false),
                };
                (lift(tpts[j][0]), lift(tpts[j][1]), nx, ny, valid)
            }
            NnMode::SoftMin { temperature } => {
                let d2: Vec<S> = tpts
                    .iter()
                    .map(|q| {
                        let dx = px - q[0];
                        let dy = py - q[1];
                        dx * dx + dy * dy
                    })
                    .collect();
                let m = d2.iter().map(|d| d.value()).fold(f64::INFINITY, f64::min);
                let mut z = zero;
                let mut qx = zero;
                let mut qy = zero;
                let mut nx = zero;
                let mut ny = zero;
                for (j, dj) in d2.iter().enumerate() {
                    let u = (-(*dj - m) / temperature).exp();
                    z = z + u;
                    qx = qx + u * tpts[j][0];
                    qy = qy + u * tpts[j][1];
                    if let Some(ns) = tnormals {
                        nx = nx + u * ns[j][0];
                        ny = ny + u * ns[j][1];
                    }
                }
                let zinv = z.recip();
                qx = qx * zinv;
                qy = qy * zinv;
                nx = nx * zinv;
                ny = ny * zinv;
                let valid =
                    tnormals.is_some() && (nx.value() * nx.value() + ny.value() * ny.value()) > 0.0;
                (qx, qy, nx, ny, valid)
            }
        };

        let ex = px - qx;
        let ey = py - qy;
        let dist = (ex * ex + ey * ey).sqrt();

        // Residual used by the objective and the robust weight, squared to
        // avoid a non-differentiable absolute value.
        let residual_sq = if plane {
            let r = nx * ex + ny * ey;
            r * r
        } else {
            ex * ex + ey * ey
        };

        let normal_valid = !plane || has_normal;
        let w = if normal_valid {
            let gate = cfg
                .trim_distance
                .map(|trim| (-((dist - trim) * cfg.trim_steepness).tanh() + 1.0) * 0.5);
            let robust = match cfg.robust_loss {
                RobustLoss::None => None,
                RobustLoss::Cauchy { k } => Some((residual_sq * (1.0 / (k * k)) + 1.0).recip()),
                RobustLoss::Huber { delta } => {
                    Some((residual_sq * (1.0 / (delta * delta)) + 1.0).sqrt().recip())
                }
            };
            match (gate, robust) {
                (Some(g), Some(r)) => g * r * priors[i],
                (Some(g), None) => g * priors[i],
                (None, Some(r)) => r * priors[i],
                (None, None) => priors[i],
            }
        } else {
            zero
        };

        out.objective = out.objective + w * 0.5 * residual_sq;
        out.weight_sum = out.weight_sum + w;
        out.weights.push(w.value());

        // Gradient of J wrt a left-multiplied twist at zero: G' e per point,
        // G = [I2 | (-p_y, p_x)'].
        if plane {
            let r = nx * ex + ny * ey;
            let we = w * r;
            out.grad[0] = out.grad[0] + nx * we;
            out.grad[1] = out.grad[1] + ny * we;
            out.grad[2] = out.grad[2] + (-py * nx + px * ny) * we;
        } else {
            out.grad[0] = out.grad[0] + ex * w;
            out.grad[1] = out.grad[1] + ey * w;
            out.grad[2] = out.grad[2] + (-py * ex + px * ey) * w;
        }
    }
    out
}

pub(crate) struct UnrolledRun<S: Real> {
    pub pose: GSe2<S>,
    /// Weighted squared pose error against the loss reference.
    pub loss: S,
    /// Objective before each step, then at the final pose.
    pub objectives: Vec<f64>,
    pub step_norms: Vec<f64>,
    /// Correspondence weights at the final pose.
    pub final_weights: Vec<f64>,
}

/// Runs exactly `unroll` gradient-descent iterations from `init` and scores
/// the final pose against the loss reference. Source coordinates and prior
/// weights are scalar inputs so their adjoints can be queried after a taped
/// run; `lift` injects plain constants (target data, the initial pose) into
/// the scalar type.
#[allow(clippy::too_many_arguments)]
pub(crate) fn unrolled_gd<S: Real>(
    source_x: &[S],
    source_y: &[S],
    priors: &[S],
    target: &Cloud2,
    tree: &KdTree<2>,
    init: &Se2,
    cfg: &IcpConfig,
    unroll: usize,
    loss: &PoseErrorLoss,
    lift: &impl Fn(f64) -> S,
) -> Result<UnrolledRun<S>> {
    let step_size = match cfg.update_rule {
        UpdateRule::GradientDescent { step_size } => step_size,
        UpdateRule::GaussNewton => {
            return Err(Error::Config(
                "unrolled differentiation requires gradient_descent updates".into(),
            ))
        }
    };

    let mut pose = GSe2::from_se2(init, lift);
    let mut objectives = Vec::with_capacity(unroll + 1);
    let mut step_norms = Vec::with_capacity(unroll);

    for iteration in 0..unroll {
        let a = assemble_g(source_x, source_y, priors, target, tree, &pose, cfg, lift);
        if a.weight_sum.value() == 0.0 {
            return Err(Error::NoEffectiveCorrespondences { iteration });
        }
        objectives.push(a.objective.value());
        let scale = a.weight_sum.recip() * (-step_size);
        let xi = [a.grad[0] * scale, a.grad[1] * scale, a.grad[2] * scale];
        step_norms.push(
            (xi[0].value() * xi[0].value()
                + xi[1].value() * xi[1].value()
                + xi[2].value() * xi[2].value())
            .sqrt(),
        );
        pose = GSe2::exp(&xi).compose(&pose);
    }

    let fin = assemble_g(source_x, source_y, priors, target, tree, &pose, cfg, lift);
    objectives.push(fin.objective.value());

    let reference_inv = GSe2::from_se2(&loss.reference.inverse(), lift);
    let e = pose.compose(&reference_inv).log()?;
    let l = (e[0] * e[0] + e[1] * e[1]) * loss.weights.alpha + e[2] * e[2] * loss.weights.beta;

    Ok(UnrolledRun {
        pose,
        loss: l,
        objectives,
        step_norms,
        final_weights: fin.weights,
    })
}
