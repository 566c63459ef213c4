use crate::Vec3;

use super::dist2;

/// Clouds up to this size are searched exhaustively.
pub const BRUTE_FORCE_LIMIT: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Brute force up to [`BRUTE_FORCE_LIMIT`] points, k-d tree above.
    Auto,
    BruteForce,
    KdTree,
}

/// Exhaustive nearest neighbour: `(index, squared distance)`, lowest index on ties.
pub fn nearest_brute_force(points: &[Vec3], query: Vec3) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, &p) in points.iter().enumerate() {
        let d = dist2(p, query);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

#[derive(Debug, Clone, Copy)]
struct KdNode {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

#[derive(Debug, Clone)]
struct KdTree {
    nodes: Vec<KdNode>,
    root: Option<usize>,
}

impl KdTree {
    fn build(points: &[Vec3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root = Self::build_rec(points, &mut order, 0, &mut nodes);
        Self { nodes, root }
    }

    fn build_rec(
        points: &[Vec3],
        idx: &mut [usize],
        depth: usize,
        nodes: &mut Vec<KdNode>,
    ) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let axis = depth % 3;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let point = idx[mid];
        let (lo, rest) = idx.split_at_mut(mid);
        let hi = &mut rest[1..];
        let slot = nodes.len();
        nodes.push(KdNode {
            point,
            axis,
            left: None,
            right: None,
        });
        let left = Self::build_rec(points, lo, depth + 1, nodes);
        let right = Self::build_rec(points, hi, depth + 1, nodes);
        nodes[slot].left = left;
        nodes[slot].right = right;
        Some(slot)
    }

    fn nearest(&self, points: &[Vec3], query: Vec3) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        if let Some(root) = self.root {
            self.search(points, root, query, &mut best);
        }
        best
    }

    fn search(&self, points: &[Vec3], node: usize, query: Vec3, best: &mut (usize, f64)) {
        let n = self.nodes[node];
        let p = points[n.point];
        let d = dist2(p, query);
        if d < best.1 || (d == best.1 && n.point < best.0) {
            *best = (n.point, d);
        }
        let diff = query[n.axis] - p[n.axis];
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if let Some(c) = near {
            self.search(points, c, query, best);
        }
        // Equal-distance candidates on the far side may carry a lower index,
        // so only strictly farther planes are pruned.
        if let Some(c) = far {
            if diff * diff <= best.1 {
                self.search(points, c, query, best);
            }
        }
    }
}

/// Nearest-neighbour index over a borrowed cloud.
#[derive(Debug, Clone)]
pub struct NearestNeighbors<'a> {
    points: &'a [Vec3],
    tree: Option<KdTree>,
}

impl<'a> NearestNeighbors<'a> {
    pub fn new(points: &'a [Vec3]) -> Self {
        Self::with_strategy(points, Strategy::Auto)
    }

    pub fn with_strategy(points: &'a [Vec3], strategy: Strategy) -> Self {
        let use_tree = match strategy {
            Strategy::Auto => points.len() > BRUTE_FORCE_LIMIT,
            Strategy::BruteForce => false,
            Strategy::KdTree => true,
        };
        Self {
            points,
            tree: use_tree.then(|| KdTree::build(points)),
        }
    }

    /// `(index, squared distance)` of the closest point; lowest index on ties.
    pub fn nearest(&self, query: Vec3) -> (usize, f64) {
        match &self.tree {
            Some(t) => t.nearest(self.points, query),
            None => nearest_brute_force(self.points, query),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn ties_resolve_to_lowest_index() {
        let pts = vec![
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 0.0, 0.0],
        ];
        for s in [super::Strategy::BruteForce, super::Strategy::KdTree] {
            let nn = NearestNeighbors::with_strategy(&pts, s);
            assert_eq!(nn.nearest([0.0, 0.0, 0.0]).0, 0);
            assert_eq!(nn.nearest([1.0, 0.0, 0.0]).0, 0);
        }
    }

    #[test]
    fn tree_matches_brute_force_on_100_random_clouds() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for cloud in 0..100 {
            let n = rng.random_range(1..=500);
            // Coarse lattice coordinates produce many exact ties.
            let coarse = cloud % 2 == 0;
            let sample = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec3 {
                if coarse {
                    [0, 1, 2].map(|_| rng.random_range(-4..=4) as f64)
                } else {
                    [0, 1, 2].map(|_| rng.random_range(-30.0..30.0))
                }
            };
            let pts: Vec<Vec3> = (0..n).map(|_| sample(&mut rng)).collect();
            let tree = NearestNeighbors::with_strategy(&pts, super::Strategy::KdTree);
            for _ in 0..50 {
                let q = sample(&mut rng);
                assert_eq!(tree.nearest(q), nearest_brute_force(&pts, q));
            }
        }
    }

    proptest! {
        #[test]
        fn kd_tree_equals_exhaustive_search(
            pts in prop::collection::vec(prop::array::uniform3(-50.0f64..50.0), 1..300),
            q in prop::array::uniform3(-60.0f64..60.0),
        ) {
            let tree = NearestNeighbors::with_strategy(&pts, super::Strategy::KdTree);
            prop_assert_eq!(tree.nearest(q), nearest_brute_force(&pts, q));
        }
    }
}
