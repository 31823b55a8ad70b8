//! Exact nearest-neighbour search.
//!
//! The tree stores one point per node and splits on the axis of widest
//! extent. Queries are exact and deterministic: among equidistant
//! candidates the lowest point index wins, matching a brute-force scan
//! with the same tie rule. This keeps correspondences reproducible when
//! clouds contain duplicated or symmetric structure.

use nalgebra::SVector;

use crate::error::{Error, Result};

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug)]
struct Node {
    point: u32,
    axis: u8,
    left: u32,
    right: u32,
}

#[derive(Clone, Debug)]
pub struct KdTree<const D: usize> {
    points: Vec<SVector<f64, D>>,
    nodes: Vec<Node>,
}

impl<const D: usize> KdTree<D> {
    pub fn build(points: &[SVector<f64, D>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Data(
                "cannot build an index over an empty cloud".into(),
            ));
        }
        let mut indices: Vec<u32> = (0..points.len() as u32).collect();
        let mut tree = KdTree {
            points: points.to_vec(),
            nodes: Vec::with_capacity(points.len()),
        };
        tree.build_rec(&mut indices);
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &SVector<f64, D> {
        &self.points[i]
    }

    fn build_rec(&mut self, indices: &mut [u32]) -> u32 {
        if indices.is_empty() {
            return NONE;
        }
        let axis = self.widest_axis(indices);
        let mid = indices.len() / 2;
        indices.select_nth_unstable_by(mid, |&a, &b| {
            let ka = (self.points[a as usize][axis], a);
            let kb = (self.points[b as usize][axis], b);
            ka.partial_cmp(&kb).expect("finite coordinates")
        });
        let point = indices[mid];
        let slot = self.nodes.len() as u32;
        self.nodes.push(Node {
            point,
            axis: axis as u8,
            left: NONE,
            right: NONE,
        });
        let (lo, rest) = indices.split_at_mut(mid);
        let left = self.build_rec(lo);
        let right = self.build_rec(&mut rest[1..]);
        let node = &mut self.nodes[slot as usize];
        node.left = left;
        node.right = right;
        slot
    }

    fn widest_axis(&self, indices: &[u32]) -> usize {
        let mut lo = self.points[indices[0] as usize];
        let mut hi = lo;
        for &i in &indices[1..] {
            let p = &self.points[i as usize];
            for a in 0..D {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let mut axis = 0;
        let mut widest = hi[0] - lo[0];
        for a in 1..D {
            let extent = hi[a] - lo[a];
            if extent > widest {
                widest = extent;
                axis = a;
            }
        }
        axis
    }

    /// Index and Euclidean distance of the nearest point to `query`.
    pub fn nearest(&self, query: &SVector<f64, D>) -> (usize, f64) {
        let mut best = (f64::INFINITY, NONE);
        self.search(0, query, &mut best);
        (best.1 as usize, best.0.sqrt())
    }

    fn search(&self, node: u32, query: &SVector<f64, D>, best: &mut (f64, u32)) {
        let n = self.nodes[node as usize];
        let p = &self.points[n.point as usize];
        let d2 = (p - query).norm_squared();
        if d2 < best.0 || (d2 == best.0 && n.point < best.1) {
            *best = (d2, n.point);
        }
        let delta = query[n.axis as usize] - p[n.axis as usize];
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if near != NONE {
            self.search(near, query, best);
        }
        // Non-strict bound: an equidistant candidate across the split plane
        // may still win the index tie.
        if far != NONE && delta * delta <= best.0 {
            self.search(far, query, best);
        }
    }

    /// The `k` nearest points, sorted by `(distance, index)`. Returns fewer
    /// entries when the cloud holds fewer than `k` points.
    pub fn k_nearest(&self, query: &SVector<f64, D>, k: usize) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k);
        self.search_k(0, query, k, &mut best);
        best.into_iter()
            .map(|(d2, i)| (i as usize, d2.sqrt()))
            .collect()
    }

    fn search_k(&self, node: u32, query: &SVector<f64, D>, k: usize, best: &mut Vec<(f64, u32)>) {
        let n = self.nodes[node as usize];
        let p = &self.points[n.point as usize];
        let d2 = (p - query).norm_squared();
        let key = (d2, n.point);
        if best.len() < k {
            let pos = best.partition_point(|e| *e < key);
            best.insert(pos, key);
        } else if key < *best.last().unwrap() {
            let pos = best.partition_point(|e| *e < key);
            best.insert(pos, key);
            best.pop();
        }
        let delta = query[n.axis as usize] - p[n.axis as usize];
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if near != NONE {
            self.search_k(near, query, k, best);
        }
        if far != NONE && (best.len() < k || delta * delta <= best.last().unwrap().0) {
            self.search_k(far, query, k, best);
        }
    }
}
