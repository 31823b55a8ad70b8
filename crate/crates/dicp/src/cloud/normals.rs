//! Covariance-based normal estimation.

use nalgebra::allocator::Allocator;
use nalgebra::{Const, DefaultAllocator, DimDiff, DimSub, SMatrix, SVector, U1};

use crate::cloud::{KdTree, PointCloud};
use crate::error::{Error, Result};

/// Estimates a unit normal per point from the `k` nearest neighbours
/// (including the point itself), oriented toward the coordinate origin.
pub fn estimate_normals<const D: usize>(cloud: &PointCloud<D>, k: usize) -> Result<PointCloud<D>>
where
    Const<D>: DimSub<U1>,
    DefaultAllocator: Allocator<DimDiff<Const<D>, U1>>,
{
    estimate_normals_toward(cloud, k, &SVector::from([0.0; D]))
}

/// Estimates normals oriented toward an explicit viewpoint (the sensor
/// position in the cloud's frame).
///
/// Neighbourhoods whose covariance cannot pin down a surface direction
/// (coincident points, or collinear points in 3D) get a zero normal, the
/// flag consumers use to skip the point.
pub fn estimate_normals_toward<const D: usize>(
    cloud: &PointCloud<D>,
    k: usize,
    viewpoint: &SVector<f64, D>,
) -> Result<PointCloud<D>>
where
    Const<D>: DimSub<U1>,
    DefaultAllocator: Allocator<DimDiff<Const<D>, U1>>,
{
    if k < D {
        return Err(Error::Config(format!(
            "normal estimation needs at least {D} neighbours, got k = {k}"
        )));
    }
    if cloud.len() < k {
        return Err(Error::Data(format!(
            "cloud has {} points but k = {k} neighbours were requested",
            cloud.len()
        )));
    }
    let tree = KdTree::build(cloud.points())?;
    let mut normals = Vec::with_capacity(cloud.len());
    for p in cloud.points() {
        let neighbours = tree.k_nearest(p, k);
        let mut mean = SVector::<f64, D>::from([0.0; D]);
        for &(j, _) in &neighbours {
            mean += cloud.point(j);
        }
        mean /= neighbours.len() as f64;
        let mut cov = SMatrix::<f64, D, D>::from([[0.0; D]; D]);
        for &(j, _) in &neighbours {
            let d = cloud.point(j) - mean;
            cov += d * d.transpose();
        }
        normals.push(normal_from_covariance(&cov, &(viewpoint - p)));
    }
    cloud.clone().with_normals(normals)
}

fn normal_from_covariance<const D: usize>(
    cov: &SMatrix<f64, D, D>,
    toward: &SVector<f64, D>,
) -> SVector<f64, D>
where
    Const<D>: DimSub<U1>,
    DefaultAllocator: Allocator<DimDiff<Const<D>, U1>>,
{
    let eigen = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..D).collect();
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[a]
            .partial_cmp(&eigen.eigenvalues[b])
            .unwrap()
    });
    let largest = eigen.eigenvalues[order[D - 1]];
    let second_smallest = eigen.eigenvalues[order[1]];
    // The surface direction is defined only when the neighbourhood spreads
    // along D-1 independent directions.
    if largest < 1e-20 || second_smallest < 1e-12 * largest {
        return SVector::from([0.0; D]);
    }
    let mut n = eigen.eigenvectors.column(order[0]).normalize();
    if n.dot(toward) < 0.0 {
        n = -n;
    }
    n
}
