//! PCA normal estimation for clouds stored without normals.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{Matrix3, SymmetricEigen};

use super::Vec3;

struct KdTree<'a> {
    points: &'a [Vec3],
    /// Implicit balanced tree: node = median of `idx[lo..hi]`, split axis = depth % 3.
    idx: Vec<usize>,
}

#[derive(PartialEq)]
struct Cand(f64, usize);

impl Eq for Cand {}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl<'a> KdTree<'a> {
    fn build(points: &'a [Vec3]) -> Self {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        Self::split(points, &mut idx, 0);
        Self { points, idx }
    }

    fn split(points: &[Vec3], idx: &mut [usize], depth: usize) {
        if idx.len() <= 1 {
            return;
        }
        let axis = depth % 3;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let (left, right) = idx.split_at_mut(mid);
        Self::split(points, left, depth + 1);
        Self::split(points, &mut right[1..], depth + 1);
    }

    fn knn(&self, q: &Vec3, k: usize) -> Vec<usize> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(q, k, 0, self.idx.len(), 0, &mut heap);
        heap.into_iter().map(|c| c.1).collect()
    }

    fn search(&self, q: &Vec3, k: usize, lo: usize, hi: usize, depth: usize, heap: &mut BinaryHeap<Cand>) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let i = self.idx[mid];
        let d2 = (self.points[i] - q).norm_squared();
        if heap.len() < k {
            heap.push(Cand(d2, i));
        } else if d2 < heap.peek().unwrap().0 {
            heap.pop();
            heap.push(Cand(d2, i));
        }
        let axis = depth % 3;
        let diff = q[axis] - self.points[i][axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, k, near.0, near.1, depth + 1, heap);
        if heap.len() < k || diff * diff < heap.peek().unwrap().0 {
            self.search(q, k, far.0, far.1, depth + 1, heap);
        }
    }
}

/// Unit normals from the smallest-eigenvalue direction of each point's
/// `k`-neighbourhood covariance. Orientation is arbitrary; degenerate
/// neighbourhoods fall back to `+z`.
pub fn estimate_normals(positions: &[Vec3], k: usize) -> Vec<Vec3> {
    let tree = KdTree::build(positions);
    positions
        .iter()
        .map(|p| {
            let nb = tree.knn(p, k.max(3));
            let centroid = nb.iter().map(|&i| positions[i]).sum::<Vec3>() / nb.len() as f64;
            let mut cov = Matrix3::zeros();
            for &i in &nb {
                let d = positions[i] - centroid;
                cov += d * d.transpose();
            }
            if cov.norm() < 1e-18 {
                return Vec3::z();
            }
            let eig = SymmetricEigen::new(cov);
            let j = eig.eigenvalues.imin();
            let n: Vec3 = eig.eigenvectors.column(j).into_owned();
            let len = n.norm();
            if len > 0.0 && len.is_finite() {
                n / len
            } else {
                Vec3::z()
            }
        })
        .collect()
}
