use std::collections::BinaryHeap;

use super::{PointAnnotation, PRECISE_SIGMA};

/// Parameters of the KNN-adaptive spread.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnnSigma {
    pub k: usize,
    pub beta: f64,
    /// Spread assigned to a point with no neighbors at all.
    pub fallback: f64,
}

impl Default for KnnSigma {
    fn default() -> Self {
        Self {
            k: 3,
            beta: 0.3,
            fallback: PRECISE_SIGMA,
        }
    }
}

/// `σ_i = beta · mean distance from point i to its k nearest other points`.
///
/// With fewer than `k` other points all of them are used; a lone point gets
/// `params.fallback`.
pub fn adaptive_sigmas(ann: &PointAnnotation, params: KnnSigma) -> Vec<f64> {
    let k = params.k.max(1);
    let tree = KdTree::build(&ann.points);
    (0..ann.points.len())
        .map(|i| {
            let d = tree.nearest_others(i, k);
            if d.is_empty() {
                params.fallback
            } else {
                params.beta * (d.iter().sum::<f64>() / d.len() as f64)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Static 2-d tree over annotation points, stored as an implicit
/// median-split array.
struct KdTree<'a> {
    points: &'a [(f64, f64)],
    order: Vec<usize>,
}

impl<'a> KdTree<'a> {
    fn build(points: &'a [(f64, f64)]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        Self::split(points, &mut order, 0);
        Self { points, order }
    }

    fn coord(p: (f64, f64), axis: usize) -> f64 {
        if axis == 0 {
            p.0
        } else {
            p.1
        }
    }

    fn split(points: &[(f64, f64)], idx: &mut [usize], depth: usize) {
        if idx.len() <= 1 {
            return;
        }
        let axis = depth % 2;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            Self::coord(points[a], axis).total_cmp(&Self::coord(points[b], axis))
        });
        let (left, right) = idx.split_at_mut(mid);
        Self::split(points, left, depth + 1);
        Self::split(points, &mut right[1..], depth + 1);
    }

    /// Ascending distances from point `query` to its `k` nearest other points.
    fn nearest_others(&self, query: usize, k: usize) -> Vec<f64> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(&self.order, 0, query, k, &mut heap);
        let mut d: Vec<f64> = heap.into_iter().map(|c| c.dist2.sqrt()).collect();
        d.sort_by(f64::total_cmp);
        d
    }

    fn search(&self, idx: &[usize], depth: usize, query: usize, k: usize, heap: &mut BinaryHeap<Candidate>) {
        if idx.is_empty() {
            return;
        }
        let axis = depth % 2;
        let mid = idx.len() / 2;
        let node = idx[mid];
        let q = self.points[query];
        if node != query {
            let p = self.points[node];
            let (dx, dy) = (q.0 - p.0, q.1 - p.1);
            let cand = Candidate {
                dist2: dx * dx + dy * dy,
                index: node,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().expect("heap holds k items") {
                heap.pop();
                heap.push(cand);
            }
        }
        let diff = Self::coord(q, axis) - Self::coord(self.points[node], axis);
        let (near, far) = if diff < 0.0 {
            (&idx[..mid], &idx[mid + 1..])
        } else {
            (&idx[mid + 1..], &idx[..mid])
        };
        self.search(near, depth + 1, query, k, heap);
        let bound = heap.peek().map_or(f64::INFINITY, |c| c.dist2);
        if heap.len() < k || diff * diff <= bound {
            self.search(far, depth + 1, query, k, heap);
        }
    }
}
