//! Minimum spanning tree over the correlation graph and the pruning of
//! highly correlated variable pairs.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    pub fn root(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            let r = self.root(self.parent[x]);
            self.parent[x] = r;
        }
        self.parent[x]
    }

    /// Joins the sets of `x` and `y`; false if they were already joined.
    pub fn unite(&mut self, x: usize, y: usize) -> bool {
        let (x, y) = (self.root(x), self.root(y));
        if x == y {
            return false;
        }
        if self.rank[x] < self.rank[y] {
            self.parent[x] = y;
        } else {
            self.parent[y] = x;
            if self.rank[x] == self.rank[y] {
                self.rank[x] += 1;
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MstEdge {
    pub a: String,
    pub b: String,
    pub abs_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRemoval {
    pub removed: String,
    pub kept: String,
    pub abs_r: f64,
    pub removed_degree: usize,
    pub kept_degree: usize,
    /// Which rule decided: `degree`, `mean_abs_correlation` or `index`.
    pub rule: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MstPrune {
    pub threshold: f64,
    pub mst_edges: Vec<MstEdge>,
    pub mst_total_weight: f64,
    pub degrees: Vec<usize>,
    pub high_corr_pairs: Vec<MstEdge>,
    pub removed: Vec<PairRemoval>,
    pub retained: Vec<String>,
}

/// Kruskal on the complete graph with edge weight `1 − |r|`. Returns the
/// tree as index pairs `(i, j)` with `i < j`. Equal weights resolve by
/// lexicographic index pair.
pub fn kruskal_mst(corr: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let p = corr.nrows();
    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(p * (p.saturating_sub(1)) / 2);
    for i in 0..p {
        for j in i + 1..p {
            edges.push((1.0 - corr[(i, j)].abs(), i, j));
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut uf = UnionFind::new(p);
    let mut tree = Vec::with_capacity(p.saturating_sub(1));
    for (_, i, j) in edges {
        if uf.unite(i, j) {
            tree.push((i, j));
            if tree.len() + 1 == p {
                break;
            }
        }
    }
    tree
}

pub fn tree_weight(corr: &DMatrix<f64>, tree: &[(usize, usize)]) -> f64 {
    tree.iter().map(|&(i, j)| 1.0 - corr[(i, j)].abs()).sum()
}

/// Removes the less connected member of every pair with `|r| ≥ threshold`.
///
/// Pairs are visited by descending `|r|` (ties by index pair); a pair is
/// skipped once either member is gone. Connectivity is the MST degree; equal
/// degrees remove the variable with the larger mean absolute correlation to
/// all others, then the one with the larger index.
pub fn mst_prune(corr: &DMatrix<f64>, variables: &[String], threshold: f64) -> MstPrune {
    let p = corr.nrows();
    assert_eq!(p, variables.len(), "correlation matrix and names disagree");
    let tree = kruskal_mst(corr);
    let mut degrees = vec![0usize; p];
    for &(i, j) in &tree {
        degrees[i] += 1;
        degrees[j] += 1;
    }
    let mean_abs: Vec<f64> = (0..p)
        .map(|i| {
            if p < 2 {
                return 0.0;
            }
            (0..p).filter(|&j| j != i).map(|j| corr[(i, j)].abs()).sum::<f64>() / (p - 1) as f64
        })
        .collect();

    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..p {
        for j in i + 1..p {
            let r = corr[(i, j)].abs();
            if r >= threshold {
                pairs.push((r, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut alive = vec![true; p];
    let mut removed = Vec::new();
    for &(r, i, j) in &pairs {
        if !alive[i] || !alive[j] {
            continue;
        }
        let (drop, keep, rule) = if degrees[i] != degrees[j] {
            if degrees[i] < degrees[j] {
                (i, j, "degree")
            } else {
                (j, i, "degree")
            }
        } else if mean_abs[i] != mean_abs[j] {
            if mean_abs[i] > mean_abs[j] {
                (i, j, "mean_abs_correlation")
            } else {
                (j, i, "mean_abs_correlation")
            }
        } else {
            (j, i, "index")
        };
        alive[drop] = false;
        removed.push(PairRemoval {
            removed: variables[drop].clone(),
            kept: variables[keep].clone(),
            abs_r: r,
            removed_degree: degrees[drop],
            kept_degree: degrees[keep],
            rule: rule.to_string(),
        });
    }

    let edge = |&(i, j): &(usize, usize)| MstEdge {
        a: variables[i].clone(),
        b: variables[j].clone(),
        abs_r: corr[(i, j)].abs(),
    };
    MstPrune {
        threshold,
        mst_total_weight: tree_weight(corr, &tree),
        mst_edges: tree.iter().map(edge).collect(),
        degrees,
        high_corr_pairs: pairs.iter().map(|&(_, i, j)| edge(&(i, j))).collect(),
        removed,
        retained: (0..p)
            .filter(|&i| alive[i])
            .map(|i| variables[i].clone())
            .collect(),
    }
}
