//! Generic solver internals shared by the 2D and 3D entry points.
//!
//! `Space` abstracts the handful of dimension-specific operations (point
//! algebra, residual Jacobians, the normal-equations solve) so the
//! correspondence / weighting / update loop exists once. The planar error
//! Jacobian per point p is G = [I2 | (-p_y, p_x)]; the spatial one is
//! G = [I3 | -skew(p)].

use nalgebra::{
    Matrix2x3, Matrix3, Matrix3x6, Matrix6, SMatrix, SVector, Vector2, Vector3, Vector6,
};

use crate::cloud::{Cloud2, Cloud3, KdTree};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Se2, Se3};
use crate::icp::{
    robust_weight, trim_gate, DimensionMode, ErrorModel, IcpConfig, IcpResult, NnMode, UpdateRule,
};

pub(crate) trait Space {
    type Point: Copy;
    type Xform: Copy;
    type Twist: Copy;
    type Hess: Copy;
    type Tree;
    type Cloud;

    fn points(c: &Self::Cloud) -> &[Self::Point];
    fn normals(c: &Self::Cloud) -> Option<&[Self::Point]>;
    fn prior(c: &Self::Cloud, i: usize) -> f64;
    fn build_tree(c: &Self::Cloud) -> Result<Self::Tree>;
    fn nearest(tree: &Self::Tree, q: &Self::Point) -> (usize, f64);

    fn apply(t: &Self::Xform, p: &Self::Point) -> Self::Point;
    fn exp(tw: &Self::Twist) -> Self::Xform;
    fn compose(a: &Self::Xform, b: &Self::Xform) -> Self::Xform;
    fn to_pose(x: &Self::Xform) -> Pose;

    fn sub(a: &Self::Point, b: &Self::Point) -> Self::Point;
    fn dot(a: &Self::Point, b: &Self::Point) -> f64;
    fn norm_sq(p: &Self::Point) -> f64;
    fn zero_point() -> Self::Point;
    fn add_scaled(acc: &mut Self::Point, s: f64, p: &Self::Point);
    fn scale_point(p: &Self::Point, s: f64) -> Self::Point;

    fn zero_twist() -> Self::Twist;
    fn twist_norm(t: &Self::Twist) -> f64;
    fn scale_twist(t: &Self::Twist, s: f64) -> Self::Twist;
    /// Zeroes the out-of-plane components (z, roll, pitch) of an update.
    fn restrict_planar(t: &mut Self::Twist);

    fn zero_hess() -> Self::Hess;
    fn accumulate_point(
        h: &mut Self::Hess,
        g: &mut Self::Twist,
        p: &Self::Point,
        e: &Self::Point,
        w: f64,
    );
    fn accumulate_plane(
        h: &mut Self::Hess,
        g: &mut Self::Twist,
        p: &Self::Point,
        n: &Self::Point,
        e: f64,
        w: f64,
    );
    fn gauss_newton(h: &Self::Hess, g: &Self::Twist) -> Result<(Self::Twist, bool)>;
}

pub(crate) struct Planar;
pub(crate) struct Spatial;

impl Space for Planar {
    type Point = Vector2<f64>;
    type Xform = Se2;
    type Twist = Vector3<f64>;
    type Hess = Matrix3<f64>;
    type Tree = KdTree<2>;
    type Cloud = Cloud2;

    fn points(c: &Cloud2) -> &[Vector2<f64>] {
        c.points()
    }
    fn normals(c: &Cloud2) -> Option<&[Vector2<f64>]> {
        c.normals()
    }
    fn prior(c: &Cloud2, i: usize) -> f64 {
        c.prior_weight(i)
    }
    fn build_tree(c: &Cloud2) -> Result<KdTree<2>> {
        KdTree::build(c.points())
    }
    fn nearest(tree: &KdTree<2>, q: &Vector2<f64>) -> (usize, f64) {
        tree.nearest(q)
    }

    fn apply(t: &Se2, p: &Vector2<f64>) -> Vector2<f64> {
        t.apply(p)
    }
    fn exp(tw: &Vector3<f64>) -> Se2 {
        Se2::exp(tw)
    }
    fn compose(a: &Se2, b: &Se2) -> Se2 {
        a.compose(b)
    }
    fn to_pose(x: &Se2) -> Pose {
        Pose::Planar(*x)
    }

    fn sub(a: &Vector2<f64>, b: &Vector2<f64>) -> Vector2<f64> {
        a - b
    }
    fn dot(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
        a.dot(b)
    }
    fn norm_sq(p: &Vector2<f64>) -> f64 {
        p.norm_squared()
    }
    fn zero_point() -> Vector2<f64> {
        Vector2::zeros()
    }
    fn add_scaled(acc: &mut Vector2<f64>, s: f64, p: &Vector2<f64>) {
        *acc += p * s;
    }
    fn scale_point(p: &Vector2<f64>, s: f64) -> Vector2<f64> {
        p * s
    }

    fn zero_twist() -> Vector3<f64> {
        Vector3::zeros()
    }
    fn twist_norm(t: &Vector3<f64>) -> f64 {
        t.norm()
    }
    fn scale_twist(t: &Vector3<f64>, s: f64) -> Vector3<f64> {
        t * s
    }
    fn restrict_planar(_t: &mut Vector3<f64>) {}

    fn zero_hess() -> Matrix3<f64> {
        Matrix3::zeros()
    }
    fn accumulate_point(
        h: &mut Matrix3<f64>,
        g: &mut Vector3<f64>,
        p: &Vector2<f64>,
        e: &Vector2<f64>,
        w: f64,
    ) {
        let gmat = Matrix2x3::new(1.0, 0.0, -p[1], 0.0, 1.0, p[0]);
        *g += gmat.transpose() * e * w;
        *h += gmat.transpose() * gmat * w;
    }
    fn accumulate_plane(
        h: &mut Matrix3<f64>,
        g: &mut Vector3<f64>,
        p: &Vector2<f64>,
        n: &Vector2<f64>,
        e: f64,
        w: f64,
    ) {
        let row = Vector3::new(n[0], n[1], -p[1] * n[0] + p[0] * n[1]);
        *g += row * (w * e);
        *h += row * row.transpose() * w;
    }
    fn gauss_newton(h: &Matrix3<f64>, g: &Vector3<f64>) -> Result<(Vector3<f64>, bool)> {
        let eig = h.symmetric_eigen().eigenvalues;
        solve_normal_equations(h, g, (eig.min(), eig.max()))
    }
}

fn skew(p: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -p[2], p[1], p[2], 0.0, -p[0], -p[1], p[0], 0.0)
}

impl Space for Spatial {
    type Point = Vector3<f64>;
    type Xform = Se3;
    type Twist = Vector6<f64>;
    type Hess = Matrix6<f64>;
    type Tree = KdTree<3>;
    type Cloud = Cloud3;

    fn points(c: &Cloud3) -> &[Vector3<f64>] {
        c.points()
    }
    fn normals(c: &Cloud3) -> Option<&[Vector3<f64>]> {
        c.normals()
    }
    fn prior(c: &Cloud3, i: usize) -> f64 {
        c.prior_weight(i)
    }
    fn build_tree(c: &Cloud3) -> Result<KdTree<3>> {
        KdTree::build(c.points())
    }
    fn nearest(tree: &KdTree<3>, q: &Vector3<f64>) -> (usize, f64) {
        tree.nearest(q)
    }

    fn apply(t: &Se3, p: &Vector3<f64>) -> Vector3<f64> {
        t.apply(p)
    }
    fn exp(tw: &Vector6<f64>) -> Se3 {
        Se3::exp(tw)
    }
    fn compose(a: &Se3, b: &Se3) -> Se3 {
        a.compose(b)
    }
    fn to_pose(x: &Se3) -> Pose {
        Pose::Spatial(*x)
    }

    fn sub(a: &Vector3<f64>, b: &Vector3<f64>) -> Vector3<f64> {
        a - b
    }
    fn dot(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
        a.dot(b)
    }
    fn norm_sq(p: &Vector3<f64>) -> f64 {
        p.norm_squared()
    }
    fn zero_point() -> Vector3<f64> {
        Vector3::zeros()
    }
    fn add_scaled(acc: &mut Vector3<f64>, s: f64, p: &Vector3<f64>) {
        *acc += p * s;
    }
    fn scale_point(p: &Vector3<f64>, s: f64) -> Vector3<f64> {
        p * s
    }

    fn zero_twist() -> Vector6<f64> {
        Vector6::zeros()
    }
    fn twist_norm(t: &Vector6<f64>) -> f64 {
        t.norm()
    }
    fn scale_twist(t: &Vector6<f64>, s: f64) -> Vector6<f64> {
        t * s
    }
    fn restrict_planar(t: &mut Vector6<f64>) {
        t[2] = 0.0;
        t[3] = 0.0;
        t[4] = 0.0;
    }

    fn zero_hess() -> Matrix6<f64> {
        Matrix6::zeros()
    }
    fn accumulate_point(
        h: &mut Matrix6<f64>,
        g: &mut Vector6<f64>,
        p: &Vector3<f64>,
        e: &Vector3<f64>,
        w: f64,
    ) {
        let mut gmat = Matrix3x6::zeros();
        gmat.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&Matrix3::identity());
        gmat.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(p)));
        *g += gmat.transpose() * e * w;
        *h += gmat.transpose() * gmat * w;
    }
    fn accumulate_plane(
        h: &mut Matrix6<f64>,
        g: &mut Vector6<f64>,
        p: &Vector3<f64>,
        n: &Vector3<f64>,
        e: f64,
        w: f64,
    ) {
        let cross = p.cross(n);
        let row = Vector6::new(n[0], n[1], n[2], cross[0], cross[1], cross[2]);
        *g += row * (w * e);
        *h += row * row.transpose() * w;
    }
    fn gauss_newton(h: &Matrix6<f64>, g: &Vector6<f64>) -> Result<(Vector6<f64>, bool)> {
        let eig = h.symmetric_eigen().eigenvalues;
        solve_normal_equations(h, g, (eig.min(), eig.max()))
    }
}

/// Solves H x = -g given the extreme eigenvalues of H. The plain Cholesky
/// path is used while H is positive definite with condition below 1e12;
/// otherwise Levenberg damping `1e-6 * trace(H)/dim` is added (and escalated
/// if still singular) and the step is flagged as regularized.
fn solve_normal_equations<const N: usize>(
    h: &SMatrix<f64, N, N>,
    g: &SVector<f64, N>,
    (lmin, lmax): (f64, f64),
) -> Result<(SVector<f64, N>, bool)> {
    let rhs: SVector<f64, N> = -(*g);
    if lmin > 0.0 && lmax / lmin <= 1e12 {
        if let Some(ch) = nalgebra::Cholesky::new(*h) {
            return Ok((ch.solve(&rhs), false));
        }
    }
    let mut trace = 0.0;
    for i in 0..N {
        trace += h[(i, i)];
    }
    let mut eye = [[0.0; N]; N];
    for (i, row) in eye.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let eye = SMatrix::<f64, N, N>::from(eye);
    let mut lambda = 1e-6 * trace / N as f64;
    if lambda <= 0.0 {
        lambda = 1e-12;
    }
    for _ in 0..12 {
        if let Some(ch) = nalgebra::Cholesky::new(*h + eye * lambda) {
            return Ok((ch.solve(&rhs), true));
        }
        lambda *= 10.0;
    }
    Err(Error::Numerical(
        "normal equations remain singular after damping".into(),
    ))
}

pub(crate) struct AssembleOut<S: Space> {
    pub objective: f64,
    pub weights: Vec<f64>,
    pub weight_sum: f64,
    pub hess: S::Hess,
    pub grad: S::Twist,
}

/// One pass over the source cloud at a fixed pose: correspondences,
/// weights, objective, and the normal-equations accumulators.
pub(crate) fn assemble<S: Space>(
    source: &S::Cloud,
    target: &S::Cloud,
    tree: &S::Tree,
    pose: &S::Xform,
    cfg: &IcpConfig,
) -> AssembleOut<S> {
    let target_points = S::points(target);
    let target_normals = S::normals(target);
    let source_points = S::points(source);
    let plane = cfg.error_model == ErrorModel::PointToPlane;

    let mut out = AssembleOut::<S> {
        objective: 0.0,
        weights: Vec::with_capacity(source_points.len()),
        weight_sum: 0.0,
        hess: S::zero_hess(),
        grad: S::zero_twist(),
    };

    for (i, s) in source_points.iter().enumerate() {
        let p = S::apply(pose, s);
        let (q, n, dist) = match cfg.nn_mode {
            NnMode::HardArgmin => {
                let (j, dist) = S::nearest(tree, &p);
                let n = target_normals.map(|ns| ns[j]);
                (target_points[j], n, dist)
            }
            NnMode::SoftMin { temperature } => {
                // Softmax over negative squared distances, stabilized by the
                // minimum; the shift cancels in the normalized weights.
                let d2: Vec<f64> = target_points
                    .iter()
                    .map(|q| S::norm_sq(&S::sub(&p, q)))
                    .collect();
                let m = d2.iter().cloned().fold(f64::INFINITY, f64::min);
                let mut z = 0.0;
                let mut q_soft = S::zero_point();
                let mut n_soft = S::zero_point();
                for (j, &dj) in d2.iter().enumerate() {
                    let u = (-(dj - m) / temperature).exp();
                    z += u;
                    S::add_scaled(&mut q_soft, u, &target_points[j]);
                    if let Some(ns) = target_normals {
                        S::add_scaled(&mut n_soft, u, &ns[j]);
                    }
                }
                let q = S::scale_point(&q_soft, 1.0 / z);
                let n = target_normals.map(|_| S::scale_point(&n_soft, 1.0 / z));
                let dist = S::norm_sq(&S::sub(&p, &q)).sqrt();
                (q, n, dist)
            }
        };

        let (residual_sq, error_norm) = if plane {
            let n = n.expect("validated: point_to_plane has target normals");
            let e = S::dot(&n, &S::sub(&p, &q));
            (e * e, e.abs())
        } else {
            let e = S::sub(&p, &q);
            (S::norm_sq(&e), S::norm_sq(&e).sqrt())
        };

        // A zero target normal marks a point where estimation failed; it
        // cannot support a plane residual.
        let normal_valid = !plane || n.map_or(false, |n| S::norm_sq(&n) > 0.0);
        let w = if normal_valid {
            trim_gate(dist, cfg) * robust_weight(error_norm, cfg) * S::prior(source, i)
        } else {
            0.0
        };

        out.objective += 0.5 * w * residual_sq;
        out.weight_sum += w;
        out.weights.push(w);
        if w != 0.0 {
            if plane {
                let n = n.expect("validated above");
                let e = S::dot(&n, &S::sub(&p, &q));
                S::accumulate_plane(&mut out.hess, &mut out.grad, &p, &n, e, w);
            } else {
                let e = S::sub(&p, &q);
                S::accumulate_point(&mut out.hess, &mut out.grad, &p, &e, w);
            }
        }
    }
    out
}

pub(crate) struct StepOut<S: Space> {
    pub pose: S::Xform,
    pub step: S::Twist,
    pub objective: f64,
    pub weights: Vec<f64>,
    pub regularized: bool,
}

pub(crate) fn step<S: Space>(
    source: &S::Cloud,
    target: &S::Cloud,
    tree: &S::Tree,
    pose: &S::Xform,
    cfg: &IcpConfig,
    iteration: usize,
) -> Result<StepOut<S>> {
    let a = assemble::<S>(source, target, tree, pose, cfg);
    if a.weight_sum == 0.0 {
        return Err(Error::NoEffectiveCorrespondences { iteration });
    }
    let (mut twist, regularized) = match cfg.update_rule {
        UpdateRule::GradientDescent { step_size } => {
            (S::scale_twist(&a.grad, -step_size / a.weight_sum), false)
        }
        UpdateRule::GaussNewton => S::gauss_newton(&a.hess, &a.grad)?,
    };
    if cfg.dimension_mode == DimensionMode::TwoD {
        S::restrict_planar(&mut twist);
    }
    Ok(StepOut {
        pose: S::compose(&S::exp(&twist), pose),
        step: twist,
        objective: a.objective,
        weights: a.weights,
        regularized,
    })
}

pub(crate) fn solve<S: Space>(
    source: &S::Cloud,
    target: &S::Cloud,
    init: &S::Xform,
    cfg: &IcpConfig,
) -> Result<IcpResult> {
    let tree = S::build_tree(target)?;
    let mut pose = *init;
    let mut step_norms = Vec::new();
    let mut objectives = Vec::new();
    let mut converged = false;
    let mut regularized = false;
    let mut iterations = 0;

    for iteration in 0..cfg.max_iterations {
        match step::<S>(source, target, &tree, &pose, cfg, iteration) {
            Ok(out) => {
                objectives.push(out.objective);
                pose = out.pose;
                regularized |= out.regularized;
                iterations += 1;
                let norm = S::twist_norm(&out.step);
                step_norms.push(norm);
                if norm < cfg.convergence_step_norm {
                    converged = true;
                    break;
                }
            }
            // Total weight hit zero: terminate unconverged instead of
            // failing the solve.
            Err(Error::NoEffectiveCorrespondences { .. }) => break,
            Err(e) => return Err(e),
        }
    }

    let final_state = assemble::<S>(source, target, &tree, &pose, cfg);
    objectives.push(final_state.objective);
    Ok(IcpResult {
        pose: S::to_pose(&pose),
        objective: final_state.objective,
        iterations,
        converged,
        step_norms,
        objectives,
        correspondence_weights: final_state.weights,
        regularized,
    })
}
