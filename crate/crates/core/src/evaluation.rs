//! Spatial cross-validation folds, F1 scoring and the global/GW comparison
//! harness.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SpatialDataset;
use crate::error::{Error, Result};
use crate::exec::{derive_seed, rng_for};
use crate::forest::{fit_forest, predict_forest, ForestParams};
use crate::gw::{self, GwFitSpec, Learner};
use crate::linear::{fit_multinomial_logistic, predict_proba, DEFAULT_LOCAL_L2};

pub const DEFAULT_FOLDS: usize = 5;
const KMEANS_MAX_ITER: usize = 100;
const KMEANS_RESEEDS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldMethod {
    CoordinateClusters,
    GridBlocks,
}

impl std::str::FromStr for FoldMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coordinate_clusters" => Ok(Self::CoordinateClusters),
            "grid_blocks" => Ok(Self::GridBlocks),
            other => Err(Error::Config(format!("unknown fold method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub folds: Vec<usize>,
    pub n_folds: usize,
    pub method: FoldMethod,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for &f in &self.folds {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn validate(&self, n_units: usize) -> Result<()> {
        if self.folds.len() != n_units {
            return Err(Error::Folds(format!(
                "fold assignment covers {} units, dataset has {n_units}",
                self.folds.len()
            )));
        }
        if self.folds.iter().any(|&f| f >= self.n_folds) {
            return Err(Error::Folds("fold index out of range".into()));
        }
        if let Some(f) = self.fold_sizes().iter().position(|&s| s == 0) {
            return Err(Error::Folds(format!("fold {f} is empty")));
        }
        Ok(())
    }
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn nearest_center(p: [f64; 2], centers: &[[f64; 2]]) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (c, &ctr) in centers.iter().enumerate() {
        let d = sq_dist(p, ctr);
        if d < bd {
            bd = d;
            best = c;
        }
    }
    best
}

/// One k-means++ seeded Lloyd run; `None` when a cluster ends up empty.
fn kmeans_attempt(points: &[[f64; 2]], k: usize, seed: u64, attempt: u64) -> Option<Vec<usize>> {
    let n = points.len();
    let mut rng = rng_for(seed, attempt);
    let mut centers = vec![points[rng.random_range(0..n)]];
    let mut d2: Vec<f64> = points.iter().map(|&p| sq_dist(p, centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return None;
        }
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = n - 1;
        for (i, &d) in d2.iter().enumerate() {
            acc += d;
            if acc > u && d > 0.0 {
                pick = i;
                break;
            }
        }
        if d2[pick] == 0.0 {
            pick = d2.iter().rposition(|&d| d > 0.0)?;
        }
        centers.push(points[pick]);
        for (i, &p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points[pick]));
        }
    }

    let mut assign: Vec<usize> = points.iter().map(|&p| nearest_center(p, &centers)).collect();
    for _ in 0..KMEANS_MAX_ITER {
        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            sums[c][0] += points[i][0];
            sums[c][1] += points[i][1];
            counts[c] += 1;
        }
        if counts.contains(&0) {
            return None;
        }
        for c in 0..k {
            centers[c] = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
        }
        let next: Vec<usize> = points.iter().map(|&p| nearest_center(p, &centers)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    let mut counts = vec![0usize; k];
    for &c in &assign {
        counts[c] += 1;
    }
    if counts.contains(&0) {
        return None;
    }
    Some(assign)
}

/// Renumbers labels in order of first appearance.
fn relabel(assign: &[usize], k: usize) -> Vec<usize> {
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    assign
        .iter()
        .map(|&c| {
            if map[c] == usize::MAX {
                map[c] = next;
                next += 1;
            }
            map[c]
        })
        .collect()
}

fn grid_blocks(points: &[[f64; 2]], k: usize) -> Option<Vec<usize>> {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let span = (x1 - x0).max(y1 - y0).max(f64::MIN_POSITIVE);
    let mut g = (k as f64).sqrt().ceil() as usize;
    while g <= 4096 {
        let side = span / g as f64;
        let cell = |v: f64, o: f64| (((v - o) / side).floor() as usize).min(g - 1);
        let tiles: Vec<usize> = points.iter().map(|p| cell(p[1], y0) * g + cell(p[0], x0)).collect();
        let mut occupied: Vec<usize> = tiles.clone();
        occupied.sort_unstable();
        occupied.dedup();
        if occupied.len() >= k {
            return Some(
                tiles
                    .iter()
                    .map(|t| occupied.binary_search(t).expect("tile present") % k)
                    .collect(),
            );
        }
        g *= 2;
    }
    None
}

/// Spatial k-fold assignment of the dataset's units.
pub fn spatial_kfold(dataset: &SpatialDataset, n_folds: usize, method: FoldMethod, seed: u64) -> Result<FoldAssignment> {
    let n = dataset.n_units();
    if n_folds < 2 || n < n_folds {
        return Err(Error::Folds(format!("cannot form {n_folds} folds over {n} units")));
    }
    let points = dataset.coords();
    let folds = match method {
        FoldMethod::CoordinateClusters => (0..KMEANS_RESEEDS as u64)
            .find_map(|attempt| kmeans_attempt(&points, n_folds, seed, attempt))
            .map(|a| relabel(&a, n_folds))
            .ok_or_else(|| {
                Error::Folds(format!(
                    "k-means left a fold empty after {KMEANS_RESEEDS} seedings"
                ))
            })?,
        FoldMethod::GridBlocks => grid_blocks(&points, n_folds)
            .ok_or_else(|| Error::Folds("too few distinct locations for grid blocks".into()))?,
    };
    let out = FoldAssignment {
        folds,
        n_folds,
        method,
        seed,
    };
    out.validate(n)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class_index: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub predicted: usize,
    /// No true instances of this class in the scored set.
    pub absent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: usize,
    pub n_test: usize,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// Classes with no training units in this fold; their test units are
    /// scored as errors.
    pub missing_training_classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub model: String,
    pub n: usize,
    pub per_class: Vec<ClassScore>,
    pub macro_f1: f64,
    pub absent_classes: Vec<usize>,
    pub per_fold: Vec<FoldScore>,
    pub flagged_folds: Vec<usize>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn f1_from_counts(tp: usize, n_pred: usize, n_true: usize) -> (f64, f64, f64) {
    let p = ratio(tp, n_pred);
    let r = ratio(tp, n_true);
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Per-class precision/recall/F1 and their unweighted mean over all `C`
/// classes. Classes without true instances score 0 and are flagged.
pub fn f1_macro(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<ScoreReport> {
    if y_true.len() != y_pred.len() {
        return Err(Error::DimensionMismatch {
            expected: y_true.len(),
            found: y_pred.len(),
        });
    }
    if n_classes == 0 {
        return Err(Error::InvalidInput("need at least one class".into()));
    }
    let mut tp = vec![0usize; n_classes];
    let mut n_true = vec![0usize; n_classes];
    let mut n_pred = vec![0usize; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::InvalidInput(format!("label outside 0..{n_classes}")));
        }
        n_true[t] += 1;
        n_pred[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    let per_class: Vec<ClassScore> = (0..n_classes)
        .map(|c| {
            let (precision, recall, f1) = f1_from_counts(tp[c], n_pred[c], n_true[c]);
            ClassScore {
                class_index: c,
                precision,
                recall,
                f1,
                support: n_true[c],
                predicted: n_pred[c],
                absent: n_true[c] == 0,
            }
        })
        .collect();
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / n_classes as f64;
    Ok(ScoreReport {
        model: String::new(),
        n: y_true.len(),
        absent_classes: per_class.iter().filter(|c| c.absent).map(|c| c.class_index).collect(),
        per_class,
        macro_f1,
        per_fold: Vec::new(),
        flagged_folds: Vec::new(),
    })
}

/// F1 of the positive class of a binary problem.
pub fn binary_f1(truth: &[bool], pred: &[bool]) -> f64 {
    let tp = truth.iter().zip(pred).filter(|(t, p)| **t && **p).count();
    let n_pred = pred.iter().filter(|&&p| p).count();
    let n_true = truth.iter().filter(|&&t| t).count();
    f1_from_counts(tp, n_pred, n_true).2
}

/// Row-wise argmax; ties go to the smaller class index.
pub fn argmax_rows(m: &DMatrix<f64>) -> Vec<usize> {
    (0..m.nrows())
        .map(|i| {
            let mut best = 0;
            for c in 1..m.ncols() {
                if m[(i, c)] > m[(i, best)] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalModelKind {
    MultinomialLr,
    Forest,
}

impl GlobalModelKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::MultinomialLr => "multinomial_lr",
            Self::Forest => "forest",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalSettings {
    pub l2_lambda: f64,
    pub forest: ForestParams,
}

impl Default for GlobalSettings {
    fn default() -> Self {
        Self {
            l2_lambda: DEFAULT_LOCAL_L2,
            forest: ForestParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalEvaluation {
    pub report: ScoreReport,
    /// Out-of-fold class prediction per unit, dataset order.
    pub predictions: Vec<usize>,
}

/// Fits a global model on `train` rows and predicts `test` rows. Classes
/// absent from the training rows can never be predicted.
#[allow(clippy::too_many_arguments)]
pub fn fit_predict_global(
    x: &DMatrix<f64>,
    labels: &[usize],
    n_classes: usize,
    train: &[usize],
    test: &[usize],
    kind: GlobalModelKind,
    settings: &GlobalSettings,
    seed_stream: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut present = vec![false; n_classes];
    for &i in train {
        present[labels[i]] = true;
    }
    let kept: Vec<usize> = (0..n_classes).filter(|&c| present[c]).collect();
    let missing: Vec<usize> = (0..n_classes).filter(|&c| !present[c]).collect();
    if kept.is_empty() {
        return Err(Error::Folds("training split is empty".into()));
    }
    if kept.len() == 1 {
        return Ok((vec![kept[0]; test.len()], missing));
    }
    let mut remap = vec![usize::MAX; n_classes];
    for (k, &c) in kept.iter().enumerate() {
        remap[c] = k;
    }
    let xt = x.select_rows(train);
    let yt: Vec<usize> = train.iter().map(|&i| remap[labels[i]]).collect();
    let xs = x.select_rows(test);
    let w = vec![1.0; train.len()];
    let proba = match kind {
        GlobalModelKind::MultinomialLr => {
            let m = fit_multinomial_logistic(&xt, &yt, &w, kept.len(), settings.l2_lambda)?;
            predict_proba(&m, &xs)?
        }
        GlobalModelKind::Forest => {
            let params = ForestParams {
                seed: derive_seed(settings.forest.seed, seed_stream),
                ..settings.forest.clone()
            };
            let m = fit_forest(&xt, &yt, kept.len(), &w, &params)?;
            predict_forest(&m, &xs)?
        }
    };
    Ok((argmax_rows(&proba).into_iter().map(|k| kept[k]).collect(), missing))
}

/// Spatially cross-validated global model. The pooled out-of-fold
/// predictions are scored once; per-fold scores are attached.
pub fn evaluate_global(
    dataset: &SpatialDataset,
    kind: GlobalModelKind,
    folds: &FoldAssignment,
    settings: &GlobalSettings,
) -> Result<GlobalEvaluation> {
    let n = dataset.n_units();
    folds.validate(n)?;
    let labels = dataset.labels()?;
    let c = dataset.n_classes();
    let x = dataset.feature_matrix();
    let per_fold: Vec<Result<_>> = (0..folds.n_folds)
        .into_par_iter()
        .map(|f| {
            let train = folds.train_indices(f);
            let test = folds.test_indices(f);
            let (pred, missing) = fit_predict_global(&x, &labels, c, &train, &test, kind, settings, f as u64)?;
            Ok((test, pred, missing))
        })
        .collect();

    let mut predictions = vec![0usize; n];
    let mut fold_scores = Vec::with_capacity(folds.n_folds);
    let mut flagged = Vec::new();
    for (f, res) in per_fold.into_iter().enumerate() {
        let (test, pred, missing) = res?;
        let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
        let score = f1_macro(&truth, &pred, c)?;
        for (&i, &p) in test.iter().zip(&pred) {
            predictions[i] = p;
        }
        if !missing.is_empty() {
            flagged.push(f);
        }
        fold_scores.push(FoldScore {
            fold: f,
            n_test: test.len(),
            macro_f1: score.macro_f1,
            per_class_f1: score.per_class.iter().map(|s| s.f1).collect(),
            missing_training_classes: missing,
        });
    }
    let mut report = f1_macro(&labels, &predictions, c)?;
    report.model = kind.name().to_string();
    report.per_fold = fold_scores;
    report.flagged_folds = flagged;
    Ok(GlobalEvaluation { report, predictions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GwClassScore {
    pub class_index: usize,
    pub class_name: String,
    pub learner: Learner,
    pub bandwidth: crate::kernels::Bandwidth,
    /// Binary F1 of the class per fold.
    pub fold_f1: Vec<f64>,
    /// Primary per-class score: mean of `fold_f1`.
    pub mean_f1: f64,
    /// Sample sd of `fold_f1`; folds are spatial blocks, so this is the
    /// across-location dispersion.
    pub sd_f1: f64,
    pub pooled_f1: f64,
    pub n_skipped: usize,
    pub n_units: usize,
    /// Every unit fell back to the skip rule; the score carries no
    /// information about the local models.
    pub unevaluable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GwScoreReport {
    pub learner: Learner,
    pub per_class: Vec<GwClassScore>,
    /// Mean over classes of the per-class `mean_f1`.
    pub mean_class_f1: f64,
    /// Macro-F1 of the one-vs-rest argmax class when every class was fitted.
    pub ovr_macro_f1: Option<f64>,
}

pub fn mean_and_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Cross-validated one-vs-rest GW scores, one spec per class.
pub fn evaluate_gw(dataset: &SpatialDataset, specs: &[GwFitSpec], folds: &FoldAssignment) -> Result<GwScoreReport> {
    if specs.is_empty() {
        return Err(Error::InvalidInput("no class specifications given".into()));
    }
    let learner = specs[0].learner;
    if specs.iter().any(|s| s.learner != learner) {
        return Err(Error::LearnerMismatch("all class specs must share one learner".into()));
    }
    let n = dataset.n_units();
    let mut per_class = Vec::with_capacity(specs.len());
    let mut probs: Vec<Option<Vec<f64>>> = vec![None; dataset.n_classes()];
    for spec in specs {
        let cv = gw::cross_validate(dataset, spec, folds)?;
        let (mean_f1, sd_f1) = mean_and_sd(&cv.fold_f1);
        per_class.push(GwClassScore {
            class_index: spec.target_class,
            class_name: dataset.class_names()[spec.target_class].clone(),
            learner,
            bandwidth: spec.kernel.bandwidth,
            fold_f1: cv.fold_f1.clone(),
            mean_f1,
            sd_f1,
            pooled_f1: cv.pooled_f1,
            n_skipped: cv.n_skipped,
            n_units: n,
            unevaluable: cv.n_skipped == n,
        });
        probs[spec.target_class] = Some(cv.probabilities);
    }
    let ovr_macro_f1 = if probs.iter().all(Option::is_some) {
        let c = probs.len();
        let m = DMatrix::from_fn(n, c, |i, k| probs[k].as_ref().expect("all classes fitted")[i]);
        Some(f1_macro(&dataset.labels()?, &argmax_rows(&m), c)?.macro_f1)
    } else {
        None
    };
    let mean_class_f1 = per_class.iter().map(|s| s.mean_f1).sum::<f64>() / per_class.len() as f64;
    Ok(GwScoreReport {
        learner,
        per_class,
        mean_class_f1,
        ovr_macro_f1,
    })
}
