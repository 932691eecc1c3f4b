//! Random forest of CART trees grown on weighted bootstrap samples.
//!
//! Sample weights act as resampling probabilities: each tree draws as many
//! rows as there are positively weighted rows, with replacement, with
//! probability proportional to weight. Within a tree a node's weight is its
//! bootstrap count. With `bootstrap = false` the raw weights are used as node
//! weights instead.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Features tried per split; `None` means `⌈√p⌉`.
    pub mtry: Option<usize>,
    pub min_leaf_weight: f64,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 12,
            mtry: None,
            min_leaf_weight: 1.0,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn resolved_mtry(&self, p: usize) -> usize {
        self.mtry.unwrap_or_else(|| (p as f64).sqrt().ceil() as usize).clamp(1, p.max(1))
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::InvalidInput("n_trees must be at least 1".into()));
        }
        if let Some(m) = self.mtry {
            if m == 0 || m > p {
                return Err(Error::InvalidInput(format!("mtry must lie in 1..={p}, got {m}")));
            }
        }
        if !(self.min_leaf_weight > 0.0 && self.min_leaf_weight.is_finite()) {
            return Err(Error::InvalidInput("min_leaf_weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        probabilities: Vec<f64>,
    },
}

/// Nodes stored flat; index 0 is the root. Rows with `x[feature] <= threshold`
/// go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn leaf_probabilities(&self, row: &[f64]) -> &[f64] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { probabilities } => return probabilities,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], at: usize) -> usize {
            match &nodes[at] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    pub n_classes: usize,
    pub n_features: usize,
    pub params: ForestParams,
}

impl ForestModel {
    pub fn row_probabilities(&self, row: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_classes];
        for tree in &self.trees {
            for (a, p) in acc.iter_mut().zip(tree.leaf_probabilities(row)) {
                *a += p;
            }
        }
        let n = self.trees.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// Gini impurity `1 − Σ (w_c / W)²`.
pub fn gini(class_weight: &[f64]) -> f64 {
    let total: f64 = class_weight.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    1.0 - class_weight.iter().map(|w| (w / total).powi(2)).sum::<f64>()
}

struct Grower<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [usize],
    n_classes: usize,
    mtry: usize,
    max_depth: usize,
    min_leaf_weight: f64,
    nodes: Vec<TreeNode>,
    scratch: Vec<(f64, usize, usize, f64)>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    impurity: f64,
}

impl Grower<'_> {
    fn class_weights(&self, rows: &[(usize, f64)]) -> Vec<f64> {
        let mut cw = vec![0.0; self.n_classes];
        for &(r, w) in rows {
            cw[self.y[r]] += w;
        }
        cw
    }

    fn leaf(&mut self, cw: &[f64]) -> usize {
        let total: f64 = cw.iter().sum();
        let mut probabilities: Vec<f64> = cw.iter().map(|w| w / total).collect();
        // renormalise so the leaf sums to one in floating point as well
        let s: f64 = probabilities.iter().sum();
        probabilities.iter_mut().for_each(|p| *p /= s);
        self.nodes.push(TreeNode::Leaf { probabilities });
        self.nodes.len() - 1
    }

    /// Best midpoint split on one feature. `buf` is scratch space reused
    /// across calls; rows are visited in (value, row index) order.
    fn best_split_on(
        &self,
        rows: &[(usize, f64)],
        feature: usize,
        total: f64,
        buf: &mut Vec<(f64, usize, usize, f64)>,
    ) -> Option<BestSplit> {
        let n = self.x.nrows();
        let col = &self.x.as_slice()[feature * n..(feature + 1) * n];
        buf.clear();
        buf.extend(rows.iter().map(|&(r, w)| (col[r], r, self.y[r], w)));
        buf.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if buf[0].0 == buf[buf.len() - 1].0 {
            return None;
        }
        let mut left = vec![0.0; self.n_classes];
        let mut right = vec![0.0; self.n_classes];
        for &(_, _, c, w) in buf.iter() {
            right[c] += w;
        }
        let mut wl = 0.0;
        let mut best: Option<BestSplit> = None;
        for i in 0..buf.len() - 1 {
            let (v, _, c, w) = buf[i];
            left[c] += w;
            right[c] -= w;
            wl += w;
            let next = buf[i + 1].0;
            if v == next {
                continue;
            }
            let wr = total - wl;
            if wl < self.min_leaf_weight || wr < self.min_leaf_weight {
                continue;
            }
            let impurity = (wl * gini(&left) + wr * gini(&right)) / total;
            if best.as_ref().is_none_or(|b| impurity < b.impurity) {
                let mut threshold = 0.5 * (v + next);
                // guard against the midpoint rounding onto the upper value
                if threshold >= next {
                    threshold = v;
                }
                best = Some(BestSplit {
                    feature,
                    threshold,
                    impurity,
                });
            }
        }
        best
    }

    fn grow(&mut self, rows: &mut [(usize, f64)], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let cw = self.class_weights(rows);
        let total: f64 = cw.iter().sum();
        let parent = gini(&cw);
        let pure = cw.iter().filter(|&&w| w > 0.0).count() <= 1;
        if pure || depth >= self.max_depth || total < 2.0 * self.min_leaf_weight {
            return self.leaf(&cw);
        }

        // draw features in a random order and evaluate until `mtry`
        // non-constant ones have been tried
        let p = self.x.ncols();
        let mut order: Vec<usize> = (0..p).collect();
        let mut tried = 0;
        let mut best: Option<BestSplit> = None;
        let mut buf = std::mem::take(&mut self.scratch);
        for slot in 0..p {
            if tried == self.mtry {
                break;
            }
            let pick = rng.random_range(slot..p);
            order.swap(slot, pick);
            let f = order[slot];
            let Some(s) = self.best_split_on(rows, f, total, &mut buf) else {
                continue;
            };
            tried += 1;
            let better = match &best {
                None => true,
                Some(b) => s.impurity < b.impurity || (s.impurity == b.impurity && s.feature < b.feature),
            };
            if better {
                best = Some(s);
            }
        }
        self.scratch = buf;
        let Some(split) = best else {
            return self.leaf(&cw);
        };
        if split.impurity >= parent - 1e-15 {
            return self.leaf(&cw);
        }
        debug_assert!(split.impurity <= parent + 1e-12);

        let at = self.nodes.len();
        self.nodes.push(TreeNode::Leaf {
            probabilities: Vec::new(),
        });
        let (f, t) = (split.feature, split.threshold);
        let x = self.x;
        let mut cut = 0;
        for i in 0..rows.len() {
            if x[(rows[i].0, f)] <= t {
                rows.swap(i, cut);
                cut += 1;
            }
        }
        let (l, r) = rows.split_at_mut(cut);
        let left = self.grow(l, depth + 1, rng);
        let right = self.grow(r, depth + 1, rng);
        self.nodes[at] = TreeNode::Split {
            feature: f,
            threshold: t,
            left,
            right,
        };
        at
    }
}

/// Bootstrap counts for rows in `order`, returned by original row index.
fn weighted_bootstrap(w: &[f64], order: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut cum = Vec::with_capacity(order.len());
    let mut acc = 0.0;
    for &r in order {
        acc += w[r];
        cum.push(acc);
    }
    let draws = order.iter().filter(|&&r| w[r] > 0.0).count();
    let mut counts = vec![0.0; w.len()];
    for _ in 0..draws {
        let u = rng.random::<f64>() * acc;
        let mut k = cum.partition_point(|&c| c <= u).min(order.len() - 1);
        // never land on a zero-weight row at the boundary
        while w[order[k]] == 0.0 && k > 0 {
            k -= 1;
        }
        counts[order[k]] += 1.0;
    }
    counts
}

fn fit_tree(
    x: &DMatrix<f64>,
    y: &[usize],
    n_classes: usize,
    w: &[f64],
    params: &ForestParams,
    order: &[usize],
    tree_index: usize,
) -> Tree {
    let mut rng = rng_for(params.seed, tree_index as u64);
    let node_weight = if params.bootstrap {
        weighted_bootstrap(w, order, &mut rng)
    } else {
        w.to_vec()
    };
    let mut rows: Vec<(usize, f64)> = order
        .iter()
        .filter(|&&r| node_weight[r] > 0.0)
        .map(|&r| (r, node_weight[r]))
        .collect();
    let mut grower = Grower {
        x,
        y,
        n_classes,
        mtry: params.resolved_mtry(x.ncols()),
        max_depth: params.max_depth,
        min_leaf_weight: params.min_leaf_weight,
        nodes: Vec::new(),
        scratch: Vec::with_capacity(rows.len()),
    };
    grower.grow(&mut rows, 0, &mut rng);
    Tree { nodes: grower.nodes }
}

pub fn fit_forest(
    x: &DMatrix<f64>,
    y: &[usize],
    n_classes: usize,
    w: &[f64],
    params: &ForestParams,
) -> Result<ForestModel> {
    let order: Vec<usize> = (0..x.nrows()).collect();
    fit_forest_ordered(x, y, n_classes, w, params, &order)
}

/// As [`fit_forest`], with resampling driven by a caller-supplied canonical
/// row order (e.g. rows sorted by unit id) so the fit does not depend on the
/// order rows happen to arrive in.
pub fn fit_forest_ordered(
    x: &DMatrix<f64>,
    y: &[usize],
    n_classes: usize,
    w: &[f64],
    params: &ForestParams,
    order: &[usize],
) -> Result<ForestModel> {
    let n = x.nrows();
    for len in [y.len(), w.len(), order.len()] {
        if len != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: len,
            });
        }
    }
    params.validate(x.ncols())?;
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidInput("sample weights must be finite and non-negative".into()));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::InvalidInput(format!("label {bad} outside {n_classes} classes")));
    }
    let mut present = vec![false; n_classes];
    for i in 0..n {
        if w[i] > 0.0 {
            present[y[i]] = true;
        }
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::DegenerateLabels(
            "fewer than two classes among positively weighted rows".into(),
        ));
    }
    let trees: Vec<Tree> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| fit_tree(x, y, n_classes, w, params, order, t))
        .collect();
    Ok(ForestModel {
        trees,
        n_classes,
        n_features: x.ncols(),
        params: params.clone(),
    })
}

/// n × C mean of per-tree leaf distributions.
pub fn predict_forest(model: &ForestModel, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != model.n_features {
        return Err(Error::DimensionMismatch {
            expected: model.n_features,
            found: x.ncols(),
        });
    }
    let rows: Vec<Vec<f64>> = (0..x.nrows())
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            model.row_probabilities(&row)
        })
        .collect();
    Ok(DMatrix::from_fn(x.nrows(), model.n_classes, |i, c| rows[i][c]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestSummary {
    pub params: ForestParams,
    pub n_classes: usize,
    pub n_features: usize,
    pub mean_depth: f64,
    pub training_f1: Vec<f64>,
}

pub fn summarize(model: &ForestModel, x: &DMatrix<f64>, y: &[usize]) -> Result<ForestSummary> {
    let proba = predict_forest(model, x)?;
    let pred = crate::evaluation::argmax_rows(&proba);
    let report = crate::evaluation::f1_macro(y, &pred, model.n_classes)?;
    Ok(ForestSummary {
        params: model.params.clone(),
        n_classes: model.n_classes,
        n_features: model.n_features,
        mean_depth: model.trees.iter().map(|t| t.depth() as f64).sum::<f64>() / model.trees.len() as f64,
        training_f1: report.per_class.iter().map(|c| c.f1).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn accuracy(model: &ForestModel, x: &DMatrix<f64>, y: &[usize]) -> f64 {
        let p = predict_forest(model, x).unwrap();
        let pred = crate::evaluation::argmax_rows(&p);
        pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
    }

    fn blobs(n_per: usize, seed: u64) -> (DMatrix<f64>, Vec<usize>) {
        let mut rng = rng_for(seed, 0);
        let centres = [(-3.0, -3.0), (3.0, -3.0), (0.0, 3.0)];
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for (c, &(cx, cy)) in centres.iter().enumerate() {
            for _ in 0..n_per {
                rows.push(cx + rng.sample::<f64, _>(StandardNormal));
                rows.push(cy + rng.sample::<f64, _>(StandardNormal));
                y.push(c);
            }
        }
        (DMatrix::from_row_slice(y.len(), 2, &rows), y)
    }

    #[test]
    fn step_function_is_learned_exactly() {
        let xs: Vec<f64> = (0..40).map(|i| i as f64 - 19.5).collect();
        let x = DMatrix::from_column_slice(40, 1, &xs);
        let y: Vec<usize> = xs.iter().map(|&v| usize::from(v > 0.0)).collect();
        let params = ForestParams {
            n_trees: 25,
            ..Default::default()
        };
        let m = fit_forest(&x, &y, 2, &[1.0; 40], &params).unwrap();
        assert_eq!(accuracy(&m, &x, &y), 1.0);
    }

    #[test]
    fn zero_weight_on_one_class_is_degenerate() {
        let x = DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let y = [0, 0, 1, 1];
        assert!(matches!(
            fit_forest(&x, &y, 2, &[1.0, 1.0, 0.0, 0.0], &ForestParams::default()),
            Err(Error::DegenerateLabels(_))
        ));
    }

    /// Exhaustive search over all midpoints with weighted Gini.
    fn brute_force_split(xs: &[f64], y: &[usize], w: &[f64], n_classes: usize) -> (f64, f64) {
        let mut vals: Vec<f64> = xs.to_vec();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        let total: f64 = w.iter().sum();
        let mut best = (f64::INFINITY, f64::NAN);
        for pair in vals.windows(2) {
            let t = 0.5 * (pair[0] + pair[1]);
            let mut l = vec![0.0; n_classes];
            let mut r = vec![0.0; n_classes];
            for i in 0..xs.len() {
                if xs[i] <= t {
                    l[y[i]] += w[i];
                } else {
                    r[y[i]] += w[i];
                }
            }
            let imp = (l.iter().sum::<f64>() * gini(&l) + r.iter().sum::<f64>() * gini(&r)) / total;
            if imp < best.0 {
                best = (imp, t);
            }
        }
        best
    }

    fn root_threshold(m: &ForestModel) -> f64 {
        match &m.trees[0].nodes[0] {
            TreeNode::Split { threshold, .. } => *threshold,
            TreeNode::Leaf { .. } => f64::NAN,
        }
    }

    #[test]
    fn depth_one_stump_matches_exhaustive_split() {
        let xs = [0.3, 1.7, 2.2, 5.0];
        let y = [0, 0, 1, 0];
        let w = [1.0, 2.0, 1.0, 1.0];
        let x = DMatrix::from_column_slice(4, 1, &xs);
        let params = ForestParams {
            n_trees: 1,
            max_depth: 1,
            bootstrap: false,
            ..Default::default()
        };
        let m = fit_forest(&x, &y, 2, &w, &params).unwrap();
        let (_, t) = brute_force_split(&xs, &y, &w, 2);
        assert_eq!(root_threshold(&m), t);
    }

    #[test]
    fn single_tree_and_identical_trees() {
        let (x, y) = blobs(20, 3);
        let one = ForestParams {
            n_trees: 1,
            seed: 5,
            ..Default::default()
        };
        let m = fit_forest(&x, &y, 3, &vec![1.0; 60], &one).unwrap();
        let p = predict_forest(&m, &x).unwrap();
        for i in 0..60 {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            let leaf = m.trees[0].leaf_probabilities(&row);
            for c in 0..3 {
                assert_eq!(p[(i, c)], leaf[c]);
            }
        }
        let same = ForestParams {
            n_trees: 7,
            mtry: Some(2),
            bootstrap: false,
            ..Default::default()
        };
        let m = fit_forest(&x, &y, 3, &vec![1.0; 60], &same).unwrap();
        assert!(m.trees.windows(2).all(|t| t[0] == t[1]));
        let p = predict_forest(&m, &x).unwrap();
        for i in 0..60 {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            let leaf = m.trees[0].leaf_probabilities(&row);
            for c in 0..3 {
                assert!((p[(i, c)] - leaf[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn held_out_blobs_are_classified() {
        let (x, y) = blobs(100, 11);
        let (xt, yt) = blobs(100, 12);
        let params = ForestParams {
            n_trees: 500,
            seed: 1,
            ..Default::default()
        };
        let m = fit_forest(&x, &y, 3, &vec![1.0; 300], &params).unwrap();
        assert!(accuracy(&m, &xt, &yt) >= 0.95);
        let p = predict_forest(&m, &xt).unwrap();
        for i in 0..300 {
            assert!((p.row(i).sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn leaves_sum_to_one_and_refit_is_identical() {
        let (x, y) = blobs(30, 2);
        let w: Vec<f64> = (0..90).map(|i| 0.5 + (i % 7) as f64 / 3.0).collect();
        let params = ForestParams {
            n_trees: 20,
            seed: 9,
            ..Default::default()
        };
        let a = fit_forest(&x, &y, 3, &w, &params).unwrap();
        let b = fit_forest(&x, &y, 3, &w, &params).unwrap();
        assert_eq!(a, b);
        for t in &a.trees {
            for node in &t.nodes {
                match node {
                    TreeNode::Leaf { probabilities } => {
                        assert!((probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12)
                    }
                    TreeNode::Split { threshold, .. } => assert!(threshold.is_finite()),
                }
            }
            assert!(t.depth() <= params.max_depth);
        }
    }

    #[test]
    fn dimension_mismatch_on_predict() {
        let (x, y) = blobs(10, 1);
        let m = fit_forest(&x, &y, 3, &[1.0; 30], &ForestParams { n_trees: 2, ..Default::default() }).unwrap();
        assert!(matches!(
            predict_forest(&m, &DMatrix::zeros(2, 3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn root_split_matches_oracle_for_one_feature(seed in any::<u64>(), n in 4usize..30) {
            let mut rng = rng_for(seed, 1);
            let xs: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 20.0).round()).collect();
            let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let w: Vec<f64> = (0..n).map(|_| 1.0 + rng.random::<f64>()).collect();
            prop_assume!(y.iter().any(|&c| c != y[0]));
            let x = DMatrix::from_column_slice(n, 1, &xs);
            let params = ForestParams { n_trees: 1, max_depth: 1, bootstrap: false, ..Default::default() };
            let m = fit_forest(&x, &y, 3, &w, &params).unwrap();
            let (imp, t) = brute_force_split(&xs, &y, &w, 3);
            let parent = {
                let mut cw = vec![0.0; 3];
                for i in 0..n { cw[y[i]] += w[i]; }
                gini(&cw)
            };
            prop_assert!(imp <= parent + 1e-12);
            if imp < parent - 1e-12 {
                prop_assert_eq!(root_threshold(&m), t);
            }
        }

        #[test]
        fn row_order_does_not_matter_with_canonical_order(seed in any::<u64>()) {
            let (x, y) = blobs(15, seed);
            let n = y.len();
            let w: Vec<f64> = (0..n).map(|i| 1.0 + (i % 3) as f64).collect();
            let params = ForestParams { n_trees: 5, seed, ..Default::default() };
            let ident: Vec<usize> = (0..n).collect();
            let a = fit_forest_ordered(&x, &y, 3, &w, &params, &ident).unwrap();
            // reverse the rows; the canonical order points back at the originals
            let perm: Vec<usize> = (0..n).rev().collect();
            let px = DMatrix::from_fn(n, 2, |i, j| x[(perm[i], j)]);
            let py: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
            let pw: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
            let canon: Vec<usize> = (0..n).map(|k| n - 1 - k).collect();
            let b = fit_forest_ordered(&px, &py, 3, &pw, &params, &canon).unwrap();
            let pa = predict_forest(&a, &x).unwrap();
            let pb = predict_forest(&b, &x).unwrap();
            prop_assert_eq!(pa, pb);
        }
    }
}
