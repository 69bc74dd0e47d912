//! Exact nearest-neighbour search over 3-D points with a static k-d tree.

use nalgebra::Vector3;

const LEAF_SIZE: usize = 16;

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Balanced k-d tree built once over a point slice. Queries return the
/// index into the original slice and the squared distance.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    /// Permutation of original indices, grouped by leaf.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let mut tree = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let (mut lo, mut hi) = (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY));
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        let mid = start + (end - start) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// Closest point to `q`; ties go to the smaller original index.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        self.nearest_filtered(q, usize::MAX)
    }

    /// Closest point other than index `skip`.
    pub fn nearest_excluding(&self, q: &Vector3<f64>, skip: usize) -> Option<(usize, f64)> {
        self.nearest_filtered(q, skip)
    }

    fn nearest_filtered(&self, q: &Vector3<f64>, skip: usize) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, skip, &mut best);
        (best.0 != usize::MAX).then_some(best)
    }

    fn search(&self, node: usize, q: &Vector3<f64>, skip: usize, best: &mut (usize, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if i == skip {
                        continue;
                    }
                    let d = (self.points[i] - q).norm_squared();
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, skip, best);
                // `<=` keeps equal-distance points on the far side reachable for the index tie-break
                if diff * diff <= best.1 {
                    self.search(far, q, skip, best);
                }
            }
        }
    }
}
