//! Minimal 3D kd-tree for nearest-neighbor correspondence search.

use nalgebra::Vector3;

pub struct KdTree {
    nodes: Vec<Node>,
    points: Vec<Vector3<f64>>,
}

struct Node {
    /// Index into `points`.
    point: u32,
    axis: u8,
    left: i32,
    right: i32,
}

impl KdTree {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        let mut idx: Vec<u32> = (0..points.len() as u32).collect();
        let mut tree = KdTree {
            nodes: Vec::with_capacity(points.len()),
            points: points.to_vec(),
        };
        if !points.is_empty() {
            tree.build_rec(&mut idx);
        }
        tree
    }

    fn build_rec(&mut self, idx: &mut [u32]) -> i32 {
        if idx.is_empty() {
            return -1;
        }
        // Split along the widest axis for balanced cells.
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &i in idx.iter() {
            let p = self.points[i as usize];
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
        let extent = hi - lo;
        let axis = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            self.points[a as usize][axis]
                .partial_cmp(&self.points[b as usize][axis])
                .unwrap()
                .then(a.cmp(&b))
        });
        let point = idx[mid];
        let node_id = self.nodes.len() as i32;
        self.nodes.push(Node {
            point,
            axis: axis as u8,
            left: -1,
            right: -1,
        });
        let (left_slice, rest) = idx.split_at_mut(mid);
        let right_slice = &mut rest[1..];
        let left = self.build_rec(left_slice);
        let right = self.build_rec(right_slice);
        self.nodes[node_id as usize].left = left;
        self.nodes[node_id as usize].right = right;
        node_id
    }

    /// Index and squared distance of the nearest stored point.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        (best.0 != usize::MAX).then_some(best)
    }

    fn search(&self, node: i32, q: &Vector3<f64>, best: &mut (usize, f64)) {
        if node < 0 {
            return;
        }
        let n = &self.nodes[node as usize];
        let p = self.points[n.point as usize];
        let d2 = (p - q).norm_squared();
        if d2 < best.1 || (d2 == best.1 && (n.point as usize) < best.0) {
            *best = (n.point as usize, d2);
        }
        let axis = n.axis as usize;
        let delta = q[axis] - p[axis];
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search(near, q, best);
        if delta * delta < best.1 {
            self.search(far, q, best);
        }
    }

    /// Indices of the k nearest points (ascending distance; index-ordered on
    /// ties). Brute force over a bounded candidate set is avoided by
    /// repeated pruning searches, which is fine for the small k used in
    /// gradient fitting.
    pub fn k_nearest(&self, q: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        let mut found: Vec<(usize, f64)> = Vec::with_capacity(k);
        let mut excluded = std::collections::HashSet::new();
        for _ in 0..k {
            let mut best = (usize::MAX, f64::INFINITY);
            self.search_excluding(0, q, &mut best, &excluded);
            if best.0 == usize::MAX {
                break;
            }
            excluded.insert(best.0);
            found.push(best);
        }
        found
    }

    fn search_excluding(
        &self,
        node: i32,
        q: &Vector3<f64>,
        best: &mut (usize, f64),
        excluded: &std::collections::HashSet<usize>,
    ) {
        if node < 0 {
            return;
        }
        let n = &self.nodes[node as usize];
        let pi = n.point as usize;
        let p = self.points[pi];
        let d2 = (p - q).norm_squared();
        if !excluded.contains(&pi) && (d2 < best.1 || (d2 == best.1 && pi < best.0)) {
            *best = (pi, d2);
        }
        let axis = n.axis as usize;
        let delta = q[axis] - p[axis];
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search_excluding(near, q, best, excluded);
        if delta * delta <= best.1 {
            self.search_excluding(far, q, best, excluded);
        }
    }
}
