//! Static 2-d tree over planar points.
//!
//! Neighbour order is lexicographic in (distance, point index), so equal
//! distances resolve toward the smaller index.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 2]>,
    nodes: Vec<Node>,
    root: Option<usize>,
}

#[derive(Debug, Clone)]
struct Node {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn d2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

impl KdTree {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        let mut tree = KdTree {
            points,
            nodes: Vec::new(),
            root: None,
        };
        tree.root = tree.build(&mut idx, 0);
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        self.points[i]
    }

    fn build(&mut self, idx: &mut [usize], depth: usize) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let axis = depth % 2;
        let pts = &self.points;
        idx.sort_by(|&a, &b| pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b)));
        let mid = idx.len() / 2;
        let point = idx[mid];
        let node = self.nodes.len();
        self.nodes.push(Node {
            point,
            axis,
            left: None,
            right: None,
        });
        let (lo, hi) = idx.split_at_mut(mid);
        let left = self.build(lo, depth + 1);
        let right = self.build(&mut hi[1..], depth + 1);
        self.nodes[node].left = left;
        self.nodes[node].right = right;
        Some(node)
    }

    /// The `k` nearest points to `query`, skipping `exclude`, as
    /// `(index, distance)` sorted ascending.
    pub fn nearest(&self, query: [f64; 2], k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_visit(self.root, query, k, exclude, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.index, c.d2.sqrt())).collect()
    }

    fn knn_visit(
        &self,
        node: Option<usize>,
        q: [f64; 2],
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        let Some(ni) = node else { return };
        let n = &self.nodes[ni];
        let p = self.points[n.point];
        if Some(n.point) != exclude {
            let c = Candidate {
                d2: d2(p, q),
                index: n.point,
            };
            if heap.len() < k {
                heap.push(c);
            } else if c < *heap.peek().unwrap() {
                heap.pop();
                heap.push(c);
            }
        }
        let diff = q[n.axis] - p[n.axis];
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.knn_visit(near, q, k, exclude, heap);
        // equality keeps equal-distance points with smaller indices reachable
        if heap.len() < k || diff * diff <= heap.peek().unwrap().d2 {
            self.knn_visit(far, q, k, exclude, heap);
        }
    }

    /// All points with distance ≤ `radius`, sorted by (distance, index).
    pub fn within(&self, query: [f64; 2], radius: f64, exclude: Option<usize>) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        self.radius_visit(self.root, query, radius, exclude, &mut out);
        out.sort();
        out.into_iter().map(|c| (c.index, c.d2.sqrt())).collect()
    }

    fn radius_visit(
        &self,
        node: Option<usize>,
        q: [f64; 2],
        radius: f64,
        exclude: Option<usize>,
        out: &mut Vec<Candidate>,
    ) {
        let Some(ni) = node else { return };
        let n = &self.nodes[ni];
        let p = self.points[n.point];
        let dd = d2(p, q);
        // compared as distances so a radius taken from a returned distance
        // always includes that point
        if dd.sqrt() <= radius && Some(n.point) != exclude {
            out.push(Candidate {
                d2: dd,
                index: n.point,
            });
        }
        let diff = q[n.axis] - p[n.axis];
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.radius_visit(near, q, radius, exclude, out);
        if diff.abs() <= radius {
            self.radius_visit(far, q, radius, exclude, out);
        }
    }
}
