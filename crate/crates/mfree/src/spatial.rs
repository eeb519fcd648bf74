//! Spatial search primitives: a static k-d tree with deterministic
//! tie-breaking, and inverse-distance (Shepard) blending.
//!
//! Determinism matters here: neighbour lists feed stencil construction, so
//! two nodes at exactly the same distance from a query must always be
//! returned in the same order. Candidates are ranked by `(distance, index)`.

use crate::Point;
use std::collections::BinaryHeap;

/// Distance below which an interpolation query is treated as an exact hit
/// on a data point and returns that point's value unblended.
pub const EXACT_HIT_TOL: f64 = 1e-12;

/// Static k-d tree over a fixed point cloud.
///
/// Built once per cloud; queries are read-only and safe to run from
/// multiple threads.
#[derive(Debug, Clone)]
pub struct KdTree<const D: usize> {
    pts: Vec<Point<D>>,
    // Implicit balanced tree: the median of each slice is its root and the
    // halves are its subtrees. `axis[mid]` stores the split axis.
    order: Vec<u32>,
    axis: Vec<u8>,
}

#[derive(PartialEq)]
struct Cand(f64, u32);

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0
            .total_cmp(&other.0)
            .then_with(|| self.1.cmp(&other.1))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<const D: usize> KdTree<D> {
    pub fn build(pts: &[Point<D>]) -> Self {
        let mut tree = KdTree {
            pts: pts.to_vec(),
            order: (0..pts.len() as u32).collect(),
            axis: vec![0; pts.len()],
        };
        tree.build_rec(0, pts.len());
        tree
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    fn build_rec(&mut self, lo: usize, hi: usize) {
        if hi.saturating_sub(lo) <= 1 {
            return;
        }
        // Split along the widest axis of the slice's bounding box.
        let mut min = self.pts[self.order[lo] as usize];
        let mut max = min;
        for &i in &self.order[lo + 1..hi] {
            let p = self.pts[i as usize];
            for a in 0..D {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let mut ax = 0;
        for a in 1..D {
            if max[a] - min[a] > max[ax] - min[ax] {
                ax = a;
            }
        }
        let mid = lo + (hi - lo) / 2;
        let pts = &self.pts;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            pts[a as usize][ax]
                .total_cmp(&pts[b as usize][ax])
                .then_with(|| a.cmp(&b))
        });
        self.axis[mid] = ax as u8;
        self.build_rec(lo, mid);
        self.build_rec(mid + 1, hi);
    }

    /// The `k` nearest points to `q`, sorted by `(distance, index)`.
    /// Returns fewer than `k` entries only when the cloud is smaller than `k`.
    pub fn knn(&self, q: &Point<D>, k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.pts.len());
        if k == 0 {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Cand> = BinaryHeap::with_capacity(k + 1);
        self.search(0, self.pts.len(), q, k, &mut heap);
        let mut out: Vec<(usize, f64)> = heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| (c.1 as usize, c.0.sqrt()))
            .collect();
        debug_assert_eq!(out.len(), k);
        out.shrink_to_fit();
        out
    }

    /// The nearest point to `q`, if the cloud is non-empty.
    pub fn nearest(&self, q: &Point<D>) -> Option<(usize, f64)> {
        self.knn(q, 1).into_iter().next()
    }

    fn consider(&self, i: u32, q: &Point<D>, k: usize, heap: &mut BinaryHeap<Cand>) {
        let d2 = (self.pts[i as usize] - q).norm_squared();
        let cand = Cand(d2, i);
        if heap.len() < k {
            heap.push(cand);
        } else if cand < *heap.peek().expect("heap non-empty") {
            heap.pop();
            heap.push(cand);
        }
    }

    fn search(&self, lo: usize, hi: usize, q: &Point<D>, k: usize, heap: &mut BinaryHeap<Cand>) {
        if hi <= lo {
            return;
        }
        if hi - lo == 1 {
            self.consider(self.order[lo], q, k, heap);
            return;
        }
        let mid = lo + (hi - lo) / 2;
        self.consider(self.order[mid], q, k, heap);
        let ax = self.axis[mid] as usize;
        let delta = q[ax] - self.pts[self.order[mid] as usize][ax];
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, q, k, heap);
        // The far half can still hold a closer point, or an equally distant
        // point with a smaller index, whenever the splitting plane is not
        // strictly farther than the current worst candidate.
        let must_descend = heap.len() < k
            || delta * delta <= heap.peek().map(|c| c.0).unwrap_or(f64::INFINITY);
        if must_descend {
            self.search(far.0, far.1, q, k, heap);
        }
    }
}

/// Inverse-distance blend of `(distance, value)` pairs.
///
/// A pair closer than [`EXACT_HIT_TOL`] short-circuits to its value, so
/// interpolation reproduces nodal data exactly. The result always lies in
/// the closed hull `[min(values), max(values)]`.
pub fn shepard_blend(neighbors: &[(f64, f64)], power: i32) -> f64 {
    assert!(!neighbors.is_empty(), "shepard blend needs at least one point");
    for &(d, v) in neighbors {
        if d < EXACT_HIT_TOL {
            return v;
        }
    }
    let mut wsum = 0.0;
    let mut acc = 0.0;
    for &(d, v) in neighbors {
        let w = d.powi(-power);
        wsum += w;
        acc += w * v;
    }
    acc / wsum
}

/// Shepard interpolation of scattered `values` at `q` using the `n` nearest
/// data points (fewer if the cloud is smaller).
pub fn shepard_query<const D: usize>(
    tree: &KdTree<D>,
    values: &[f64],
    q: &Point<D>,
    n: usize,
    power: i32,
) -> f64 {
    let nn = tree.knn(q, n);
    let pairs: Vec<(f64, f64)> = nn.iter().map(|&(i, d)| (d, values[i])).collect();
    shepard_blend(&pairs, power)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pt;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_knn<const D: usize>(pts: &[Point<D>], q: &Point<D>, k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (p - q).norm()))
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn knn_matches_brute_force_2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let pts: Vec<Point<2>> = (0..500)
            .map(|_| pt([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]))
            .collect();
        let tree = KdTree::build(&pts);
        for _ in 0..50 {
            let q = pt([rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2)]);
            for k in [1, 3, 17] {
                let got = tree.knn(&q, k);
                let want = brute_knn(&pts, &q, k);
                let gi: Vec<usize> = got.iter().map(|x| x.0).collect();
                let wi: Vec<usize> = want.iter().map(|x| x.0).collect();
                assert_eq!(gi, wi, "k={k} q={q:?}");
            }
        }
    }

    #[test]
    fn knn_matches_brute_force_3d() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Point<3>> = (0..400)
            .map(|_| {
                pt([
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ])
            })
            .collect();
        let tree = KdTree::build(&pts);
        for _ in 0..30 {
            let q = pt([
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]);
            let got = tree.knn(&q, 25);
            let want = brute_knn(&pts, &q, 25);
            let gi: Vec<usize> = got.iter().map(|x| x.0).collect();
            let wi: Vec<usize> = want.iter().map(|x| x.0).collect();
            assert_eq!(gi, wi);
        }
    }

    #[test]
    fn ties_break_by_lower_index() {
        // Four points at identical distance from the origin.
        let pts = vec![pt([1.0, 0.0]), pt([0.0, 1.0]), pt([-1.0, 0.0]), pt([0.0, -1.0])];
        let tree = KdTree::build(&pts);
        let nn = tree.knn(&pt([0.0, 0.0]), 2);
        assert_eq!(nn[0].0, 0);
        assert_eq!(nn[1].0, 1);
    }

    #[test]
    fn shepard_exact_hit_and_hull() {
        let pairs = [(0.5, 1.0), (1e-13, 7.0), (0.25, 3.0)];
        assert_eq!(shepard_blend(&pairs, 2), 7.0);

        let pairs = [(0.5, 1.0), (0.3, 5.0), (0.25, 3.0)];
        let v = shepard_blend(&pairs, 2);
        assert!(v >= 1.0 && v <= 5.0, "{v} outside hull");
    }

    #[test]
    fn shepard_weights_closer_points_more() {
        let v = shepard_blend(&[(0.1, 10.0), (1.0, 0.0)], 2);
        assert!(v > 9.0, "{v}");
    }
}
