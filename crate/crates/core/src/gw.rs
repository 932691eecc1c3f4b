//! Geographically weighted one-vs-rest classification.
//!
//! For a target class, every focal unit gets a binary model fitted on its
//! kernel-weighted neighbours (never itself). The model's positive-class
//! probability at the focal unit's own features is the focal prediction.
//! Neighbourhoods with too few positives fall back to a declared
//! probability and carry a skip record instead of a model.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{f64_or_nan, fmt_f64, SpatialDataset};
use crate::error::{Error, Result};
use crate::evaluation::{binary_f1, FoldAssignment};
use crate::exec::derive_seed;
use crate::forest::{fit_forest, ForestParams};
use crate::kernels::{weighted_cross, Bandwidth, KdTree, KernelSpec, Neighborhood, NeighborGraph};
use crate::linear::{fit_binary_logistic, DEFAULT_LOCAL_L2};

pub const DEFAULT_MIN_POSITIVE: usize = 5;
pub const DEFAULT_N_CANDIDATES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Learner {
    Logistic,
    Forest,
}

impl std::str::FromStr for Learner {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(Self::Logistic),
            "forest" => Ok(Self::Forest),
            other => Err(Error::Config(format!("unknown learner '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Positive-class probability of one model fitted on all training units.
    GlobalModel,
    /// Kernel-weighted positive rate of the neighbourhood.
    PriorRate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GwFitSpec {
    pub learner: Learner,
    pub kernel: KernelSpec,
    pub target_class: usize,
    pub min_positive: usize,
    pub fallback: Fallback,
    pub l2_lambda: f64,
    pub forest: ForestParams,
    pub threshold: f64,
}

impl GwFitSpec {
    pub fn new(learner: Learner, kernel: KernelSpec, target_class: usize) -> Self {
        Self {
            learner,
            kernel,
            target_class,
            min_positive: DEFAULT_MIN_POSITIVE,
            fallback: Fallback::PriorRate,
            l2_lambda: DEFAULT_LOCAL_L2,
            forest: ForestParams::default(),
            threshold: 0.5,
        }
    }

    pub fn with_bandwidth(&self, bandwidth: Bandwidth) -> Self {
        Self {
            kernel: self.kernel.with_bandwidth(bandwidth),
            ..self.clone()
        }
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        self.kernel.validate()?;
        if self.min_positive == 0 {
            return Err(Error::Config("min_positive must be at least 1".into()));
        }
        if self.target_class >= n_classes {
            return Err(Error::Config(format!(
                "target class {} outside {n_classes} classes",
                self.target_class
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0, 1)".into()));
        }
        if !(self.l2_lambda >= 0.0) {
            return Err(Error::Config("l2_lambda must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    BelowMinPositive,
    DegenerateLabels,
    Singular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LocalFit {
    Logistic {
        intercept: f64,
        coefficients: Vec<f64>,
        converged: bool,
    },
    /// Forests are summarised; the trees are dropped after the focal
    /// prediction.
    Forest { n_trees: usize, mean_depth: f64 },
    Skipped { reason: SkipReason },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitFit {
    pub unit_id: String,
    pub fit: LocalFit,
    pub focal_probability: f64,
    pub n_neighbors: usize,
    pub n_positive: usize,
    /// Local bandwidth in metres.
    pub bandwidth: f64,
}

impl UnitFit {
    pub fn is_skipped(&self) -> bool {
        matches!(self.fit, LocalFit::Skipped { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GwModelSet {
    pub class_index: usize,
    pub class_name: String,
    pub learner: Learner,
    pub kernel: KernelSpec,
    pub variable_names: Vec<String>,
    pub units: Vec<UnitFit>,
}

impl GwModelSet {
    pub fn n_skipped(&self) -> usize {
        self.units.iter().filter(|u| u.is_skipped()).count()
    }

    pub fn focal_probabilities(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.focal_probability).collect()
    }

    /// Writes `unit_id,status,reason,focal_probability,n_neighbors,n_positive,bandwidth`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record([
            "unit_id",
            "status",
            "reason",
            "focal_probability",
            "n_neighbors",
            "n_positive",
            "bandwidth",
        ])?;
        for u in &self.units {
            let (status, reason) = match &u.fit {
                LocalFit::Skipped { reason } => ("skipped", serde_json::to_value(reason)?.as_str().unwrap_or("").to_string()),
                _ => ("fitted", String::new()),
            };
            wtr.write_record([
                u.unit_id.as_str(),
                status,
                &reason,
                &fmt_f64(u.focal_probability),
                &u.n_neighbors.to_string(),
                &u.n_positive.to_string(),
                &fmt_f64(u.bandwidth),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

/// Weighted positive rate of a neighbourhood; unweighted if all weights are 0.
fn prior_rate(nb: &Neighborhood, positive: &[bool]) -> f64 {
    if nb.is_empty() {
        return 0.0;
    }
    let (mut wp, mut wt) = (0.0, 0.0);
    for (&j, &w) in nb.indices.iter().zip(&nb.weights) {
        wt += w;
        if positive[j] {
            wp += w;
        }
    }
    if wt > 0.0 {
        wp / wt
    } else {
        nb.indices.iter().filter(|&&j| positive[j]).count() as f64 / nb.len() as f64
    }
}

struct Engine<'a> {
    train_x: &'a DMatrix<f64>,
    positive: &'a [bool],
    spec: &'a GwFitSpec,
}

impl Engine<'_> {
    fn fit_one(&self, nb: &Neighborhood, focal_row: &[f64], fallback: f64, stream: u64) -> Result<(LocalFit, f64, usize)> {
        let active: Vec<usize> = (0..nb.len()).filter(|&k| nb.weights[k] > 0.0).collect();
        let n_positive = active.iter().filter(|&&k| self.positive[nb.indices[k]]).count();
        let skip = |reason| Ok((LocalFit::Skipped { reason }, fallback, n_positive));
        if n_positive < self.spec.min_positive {
            return skip(SkipReason::BelowMinPositive);
        }
        if n_positive == active.len() {
            return skip(SkipReason::DegenerateLabels);
        }
        let rows: Vec<usize> = active.iter().map(|&k| nb.indices[k]).collect();
        let x = self.train_x.select_rows(&rows);
        let w: Vec<f64> = active.iter().map(|&k| nb.weights[k]).collect();
        match self.spec.learner {
            Learner::Logistic => {
                let y: Vec<bool> = rows.iter().map(|&r| self.positive[r]).collect();
                match fit_binary_logistic(&x, &y, &w, self.spec.l2_lambda) {
                    Ok(m) => {
                        let p = m.positive_probability(focal_row);
                        Ok((
                            LocalFit::Logistic {
                                intercept: m.intercepts[0],
                                coefficients: m.coefficients[0].clone(),
                                converged: m.converged,
                            },
                            p,
                            n_positive,
                        ))
                    }
                    Err(Error::Singular(_)) => skip(SkipReason::Singular),
                    Err(Error::DegenerateLabels(_)) => skip(SkipReason::DegenerateLabels),
                    Err(e) => Err(e),
                }
            }
            Learner::Forest => {
                let y: Vec<usize> = rows.iter().map(|&r| usize::from(self.positive[r])).collect();
                let params = ForestParams {
                    seed: derive_seed(self.spec.forest.seed, stream),
                    ..self.spec.forest.clone()
                };
                let m = fit_forest(&x, &y, 2, &w, &params)?;
                let p = m.row_probabilities(focal_row)[1];
                let mean_depth = m.trees.iter().map(|t| t.depth() as f64).sum::<f64>() / m.trees.len() as f64;
                Ok((
                    LocalFit::Forest {
                        n_trees: m.trees.len(),
                        mean_depth,
                    },
                    p,
                    n_positive,
                ))
            }
        }
    }

    /// Runs every focal query; `streams[q]` seeds query q's forest.
    fn run(&self, query_x: &DMatrix<f64>, graph: &NeighborGraph, global: Option<&[f64]>, streams: &[u64]) -> Result<Vec<UnitFit>> {
        (0..graph.n_focal())
            .into_par_iter()
            .map(|q| {
                let nb = &graph.neighborhoods[q];
                let row: Vec<f64> = query_x.row(q).iter().copied().collect();
                let fallback = match global {
                    Some(g) => g[q],
                    None => prior_rate(nb, self.positive),
                };
                let (fit, p, n_positive) = self.fit_one(nb, &row, fallback, streams[q])?;
                Ok(UnitFit {
                    unit_id: graph.focal_ids[q].clone(),
                    fit,
                    focal_probability: p,
                    n_neighbors: nb.len(),
                    n_positive,
                    bandwidth: nb.bandwidth,
                })
            })
            .collect()
    }
}

/// Positive-class probability at `query_x` from one model fitted on all
/// training rows; the training positive rate if no model can be fitted.
fn global_probabilities(train_x: &DMatrix<f64>, positive: &[bool], query_x: &DMatrix<f64>, spec: &GwFitSpec) -> Result<Vec<f64>> {
    let n = positive.len();
    let rate = positive.iter().filter(|&&p| p).count() as f64 / n.max(1) as f64;
    let w = vec![1.0; n];
    let rows = |i: usize| -> Vec<f64> { query_x.row(i).iter().copied().collect() };
    match spec.learner {
        Learner::Logistic => match fit_binary_logistic(train_x, positive, &w, spec.l2_lambda) {
            Ok(m) => Ok((0..query_x.nrows()).map(|i| m.positive_probability(&rows(i))).collect()),
            Err(Error::DegenerateLabels(_) | Error::Singular(_)) => Ok(vec![rate; query_x.nrows()]),
            Err(e) => Err(e),
        },
        Learner::Forest => {
            let y: Vec<usize> = positive.iter().map(|&p| usize::from(p)).collect();
            match fit_forest(train_x, &y, 2, &w, &spec.forest) {
                Ok(m) => Ok((0..query_x.nrows()).map(|i| m.row_probabilities(&rows(i))[1]).collect()),
                Err(Error::DegenerateLabels(_)) => Ok(vec![rate; query_x.nrows()]),
                Err(e) => Err(e),
            }
        }
    }
}

fn positives(dataset: &SpatialDataset, target: usize) -> Result<Vec<bool>> {
    Ok(dataset.labels()?.into_iter().map(|l| l == target).collect())
}

/// Fits one local model per unit of `dataset` for `spec.target_class`.
/// `graph` must be the dataset's own weighted graph (focal units excluded
/// from their neighbourhoods).
pub fn fit_gw(dataset: &SpatialDataset, spec: &GwFitSpec, graph: &NeighborGraph) -> Result<GwModelSet> {
    spec.validate(dataset.n_classes())?;
    let n = dataset.n_units();
    if graph.n_focal() != n || graph.n_sources != n {
        return Err(Error::Integrity(format!(
            "graph has {} focal / {} source points, dataset has {n} units",
            graph.n_focal(),
            graph.n_sources
        )));
    }
    for (i, u) in dataset.units().iter().enumerate() {
        if graph.focal_ids[i] != u.unit_id {
            return Err(Error::Integrity(format!(
                "graph focal {i} is '{}', dataset unit is '{}'",
                graph.focal_ids[i], u.unit_id
            )));
        }
        if graph.neighborhoods[i].indices.iter().any(|&j| j >= n) {
            return Err(Error::Integrity(format!("neighbour index out of range at unit '{}'", u.unit_id)));
        }
    }
    let x = dataset.feature_matrix();
    let positive = positives(dataset, spec.target_class)?;
    let global = match spec.fallback {
        Fallback::GlobalModel => Some(global_probabilities(&x, &positive, &x, spec)?),
        Fallback::PriorRate => None,
    };
    let engine = Engine {
        train_x: &x,
        positive: &positive,
        spec,
    };
    let streams: Vec<u64> = (0..n as u64).collect();
    let units = engine.run(&x, graph, global.as_deref(), &streams)?;
    Ok(GwModelSet {
        class_index: spec.target_class,
        class_name: dataset.class_names()[spec.target_class].clone(),
        learner: spec.learner,
        kernel: spec.kernel,
        variable_names: dataset.variable_names().to_vec(),
        units,
    })
}

/// Builds the dataset's own graph for `spec.kernel` and fits.
pub fn fit_gw_auto(dataset: &SpatialDataset, spec: &GwFitSpec) -> Result<GwModelSet> {
    let graph = crate::kernels::build_weighted(dataset, &spec.kernel)?;
    fit_gw(dataset, spec, &graph)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GwCrossValidation {
    pub class_index: usize,
    pub bandwidth: Bandwidth,
    /// Out-of-fold focal probability per unit, dataset order.
    pub probabilities: Vec<f64>,
    pub skipped: Vec<bool>,
    pub fold_f1: Vec<f64>,
    pub pooled_f1: f64,
    pub n_skipped: usize,
}

/// Spatial cross-validation of focal predictions. For each fold the test
/// units are focal points whose neighbourhoods are drawn from the training
/// units only.
pub fn cross_validate(dataset: &SpatialDataset, spec: &GwFitSpec, folds: &FoldAssignment) -> Result<GwCrossValidation> {
    spec.validate(dataset.n_classes())?;
    let n = dataset.n_units();
    folds.validate(n)?;
    let x = dataset.feature_matrix();
    let positive = positives(dataset, spec.target_class)?;
    let coords = dataset.coords();
    let ids: Vec<String> = dataset.units().iter().map(|u| u.unit_id.clone()).collect();

    let mut probabilities = vec![0.0; n];
    let mut skipped = vec![false; n];
    let mut fold_f1 = Vec::with_capacity(folds.n_folds);
    for f in 0..folds.n_folds {
        let train = folds.train_indices(f);
        let test = folds.test_indices(f);
        let tree = KdTree::new(train.iter().map(|&i| coords[i]).collect());
        let queries: Vec<[f64; 2]> = test.iter().map(|&i| coords[i]).collect();
        let qids = test.iter().map(|&i| ids[i].clone()).collect();
        let graph = weighted_cross(&tree, &queries, qids, &spec.kernel, None)?;
        let train_x = x.select_rows(&train);
        let test_x = x.select_rows(&test);
        let train_pos: Vec<bool> = train.iter().map(|&i| positive[i]).collect();
        let global = match spec.fallback {
            Fallback::GlobalModel => Some(global_probabilities(&train_x, &train_pos, &test_x, spec)?),
            Fallback::PriorRate => None,
        };
        let engine = Engine {
            train_x: &train_x,
            positive: &train_pos,
            spec,
        };
        let streams: Vec<u64> = test.iter().map(|&i| i as u64).collect();
        let fits = engine.run(&test_x, &graph, global.as_deref(), &streams)?;
        let mut truth = Vec::with_capacity(test.len());
        let mut pred = Vec::with_capacity(test.len());
        for (&i, fit) in test.iter().zip(&fits) {
            probabilities[i] = fit.focal_probability;
            skipped[i] = fit.is_skipped();
            truth.push(positive[i]);
            pred.push(fit.focal_probability >= spec.threshold);
        }
        fold_f1.push(binary_f1(&truth, &pred));
    }
    let pred: Vec<bool> = probabilities.iter().map(|&p| p >= spec.threshold).collect();
    Ok(GwCrossValidation {
        class_index: spec.target_class,
        bandwidth: spec.kernel.bandwidth,
        pooled_f1: binary_f1(&positive, &pred),
        n_skipped: skipped.iter().filter(|&&s| s).count(),
        probabilities,
        skipped,
        fold_f1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthScore {
    pub bandwidth: Bandwidth,
    /// Pooled out-of-fold binary F1; `None` when the candidate is infeasible
    /// for some training split or every unit was skipped.
    pub f1: Option<f64>,
    pub n_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSelection {
    pub class_index: usize,
    pub best: Bandwidth,
    pub best_index: usize,
    pub table: Vec<BandwidthScore>,
}

/// Cross-validated bandwidth choice: maximum F1, ties to the smaller
/// bandwidth, then to the earlier candidate.
pub fn select_bandwidth(
    dataset: &SpatialDataset,
    spec: &GwFitSpec,
    candidates: &[Bandwidth],
    folds: &FoldAssignment,
) -> Result<BandwidthSelection> {
    if candidates.len() < 2 {
        return Err(Error::BandwidthSelection("need at least two bandwidth candidates".into()));
    }
    if candidates
        .windows(2)
        .any(|w| std::mem::discriminant(&w[0]) != std::mem::discriminant(&w[1]))
    {
        return Err(Error::BandwidthSelection("candidates mix adaptive and fixed bandwidths".into()));
    }
    let n = dataset.n_units();
    let mut table = Vec::with_capacity(candidates.len());
    for &b in candidates {
        let row = match cross_validate(dataset, &spec.with_bandwidth(b), folds) {
            Ok(cv) => BandwidthScore {
                bandwidth: b,
                f1: (cv.n_skipped < n).then_some(cv.pooled_f1),
                n_skipped: cv.n_skipped,
            },
            Err(Error::Bandwidth(_) | Error::DegenerateBandwidth(_)) => BandwidthScore {
                bandwidth: b,
                f1: None,
                n_skipped: n,
            },
            Err(e) => return Err(e),
        };
        table.push(row);
    }
    let mut best: Option<usize> = None;
    for (i, row) in table.iter().enumerate() {
        let Some(f) = row.f1 else { continue };
        best = match best {
            None => Some(i),
            Some(b) => {
                let bf = table[b].f1.expect("scored");
                let better = f > bf || (f == bf && row.bandwidth.value() < table[b].bandwidth.value());
                Some(if better { i } else { b })
            }
        };
    }
    let best_index = best.ok_or_else(|| {
        Error::BandwidthSelection(format!(
            "no bandwidth candidate produced a usable fit for class {}",
            spec.target_class
        ))
    })?;
    Ok(BandwidthSelection {
        class_index: spec.target_class,
        best: table[best_index].bandwidth,
        best_index,
        table,
    })
}

/// Geometrically spaced adaptive k from `max(30, 5p)` up to `k_max`.
pub fn default_candidates(k_max: usize, n_variables: usize, count: usize) -> Vec<Bandwidth> {
    let hi = k_max.max(2);
    let lo = (30usize).max(5 * n_variables).min(hi);
    let count = count.max(2);
    let mut ks: Vec<usize> = (0..count)
        .map(|i| {
            let t = i as f64 / (count - 1) as f64;
            ((lo as f64) * (hi as f64 / lo as f64).powf(t)).round() as usize
        })
        .collect();
    ks.dedup();
    ks.into_iter().map(Bandwidth::AdaptiveK).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSummary {
    pub variable: String,
    #[serde(deserialize_with = "f64_or_nan")]
    pub mean_abs: f64,
    /// Sample standard deviation (0 for fewer than two fitted units).
    #[serde(deserialize_with = "f64_or_nan")]
    pub sd: f64,
    /// Share of fitted units agreeing with the majority sign.
    #[serde(deserialize_with = "f64_or_nan")]
    pub sign_agreement: f64,
    pub n_units: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSurface {
    pub class_index: usize,
    pub class_name: String,
    pub variables: Vec<String>,
    pub unit_ids: Vec<String>,
    pub intercepts: Vec<Option<f64>>,
    pub coefficients: Vec<Option<Vec<f64>>>,
    pub summaries: Vec<VariableSummary>,
    /// Variables by descending mean |β|.
    pub order_by_mean_abs: Vec<String>,
    pub n_fitted: usize,
    pub n_skipped: usize,
}

impl CoefficientSurface {
    /// Writes `unit_id,intercept,<variables...>`; skipped units have empty cells.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["unit_id".to_string(), "intercept".to_string()];
        header.extend(self.variables.iter().cloned());
        wtr.write_record(&header)?;
        for i in 0..self.unit_ids.len() {
            let mut rec = vec![self.unit_ids[i].clone()];
            match (&self.intercepts[i], &self.coefficients[i]) {
                (Some(a), Some(b)) => {
                    rec.push(fmt_f64(*a));
                    rec.extend(b.iter().map(|v| fmt_f64(*v)));
                }
                _ => rec.extend(std::iter::repeat_n(String::new(), self.variables.len() + 1)),
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

pub fn summarize_values(variable: &str, values: &[f64]) -> VariableSummary {
    let n = values.len();
    let (mean_abs, sd) = if n == 0 {
        (f64::NAN, f64::NAN)
    } else {
        let (_, sd) = crate::evaluation::mean_and_sd(values);
        (values.iter().map(|v| v.abs()).sum::<f64>() / n as f64, sd)
    };
    let pos = values.iter().filter(|&&v| v > 0.0).count();
    let neg = values.iter().filter(|&&v| v < 0.0).count();
    VariableSummary {
        variable: variable.to_string(),
        mean_abs,
        sd,
        sign_agreement: if n == 0 { f64::NAN } else { pos.max(neg) as f64 / n as f64 },
        n_units: n,
    }
}

pub fn extract_coefficients(models: &GwModelSet, variable_names: &[String]) -> Result<CoefficientSurface> {
    if models.learner != Learner::Logistic {
        return Err(Error::LearnerMismatch(
            "coefficients exist only for logistic local models".into(),
        ));
    }
    let p = variable_names.len();
    let mut intercepts = Vec::with_capacity(models.units.len());
    let mut coefficients = Vec::with_capacity(models.units.len());
    for u in &models.units {
        match &u.fit {
            LocalFit::Logistic {
                intercept,
                coefficients: b,
                ..
            } => {
                if b.len() != p {
                    return Err(Error::DimensionMismatch {
                        expected: p,
                        found: b.len(),
                    });
                }
                intercepts.push(Some(*intercept));
                coefficients.push(Some(b.clone()));
            }
            LocalFit::Skipped { .. } => {
                intercepts.push(None);
                coefficients.push(None);
            }
            LocalFit::Forest { .. } => {
                return Err(Error::LearnerMismatch("forest model found in a logistic set".into()))
            }
        }
    }
    let summaries: Vec<VariableSummary> = (0..p)
        .map(|j| {
            let vals: Vec<f64> = coefficients.iter().flatten().map(|b| b[j]).collect();
            summarize_values(&variable_names[j], &vals)
        })
        .collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| summaries[b].mean_abs.total_cmp(&summaries[a].mean_abs).then(a.cmp(&b)));
    let n_fitted = coefficients.iter().filter(|c| c.is_some()).count();
    Ok(CoefficientSurface {
        class_index: models.class_index,
        class_name: models.class_name.clone(),
        variables: variable_names.to_vec(),
        unit_ids: models.units.iter().map(|u| u.unit_id.clone()).collect(),
        intercepts,
        coefficients,
        order_by_mean_abs: order.iter().map(|&j| variable_names[j].clone()).collect(),
        summaries,
        n_fitted,
        n_skipped: models.units.len() - n_fitted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionRow {
    pub class_index: usize,
    pub class_name: String,
    #[serde(deserialize_with = "f64_or_nan")]
    pub min: f64,
    #[serde(deserialize_with = "f64_or_nan")]
    pub q1: f64,
    #[serde(deserialize_with = "f64_or_nan")]
    pub median: f64,
    #[serde(deserialize_with = "f64_or_nan")]
    pub q3: f64,
    #[serde(deserialize_with = "f64_or_nan")]
    pub max: f64,
    pub n_variables: usize,
}

/// Linearly interpolated quantile of sorted data (the common "type 7").
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per class, the distribution of per-variable coefficient standard deviations.
pub fn coefficient_dispersion_by_class(surfaces: &[CoefficientSurface]) -> Vec<DispersionRow> {
    surfaces
        .iter()
        .map(|s| {
            let mut sds: Vec<f64> = s.summaries.iter().map(|v| v.sd).filter(|v| v.is_finite()).collect();
            sds.sort_by(f64::total_cmp);
            let q = |p: f64| if sds.is_empty() { f64::NAN } else { quantile_sorted(&sds, p) };
            DispersionRow {
                class_index: s.class_index,
                class_name: s.class_name.clone(),
                min: q(0.0),
                q1: q(0.25),
                median: q(0.5),
                q3: q(0.75),
                max: q(1.0),
                n_variables: sds.len(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::UnitRecord;
    use crate::evaluation::{spatial_kfold, FoldMethod};
    use crate::exec::rng_for;
    use crate::linear::sigmoid;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Binary labels from a logit whose slope may depend on location.
    fn logit_dataset(n: usize, seed: u64, slope: impl Fn(f64, f64) -> f64) -> SpatialDataset {
        let mut rng = rng_for(seed, 0);
        let units = (0..n)
            .map(|i| {
                let x = rng.random::<f64>() * 1000.0;
                let y = rng.random::<f64>() * 1000.0;
                let f: f64 = rng.sample(StandardNormal);
                let g: f64 = rng.sample(StandardNormal);
                let eta = slope(x, y) * f - 0.5 * g;
                let label = usize::from(rng.random::<f64>() < sigmoid(eta));
                UnitRecord {
                    unit_id: format!("u{i:04}"),
                    x,
                    y,
                    features: vec![f, g],
                    label: Some(label),
                }
            })
            .collect();
        SpatialDataset::new(units, vec!["f".into(), "g".into()], vec!["0".into(), "1".into()]).unwrap()
    }

    fn logistic_spec(k: usize) -> GwFitSpec {
        GwFitSpec::new(Learner::Logistic, KernelSpec::adaptive_bisquare(k), 1)
    }

    #[test]
    fn stationary_local_coefficients_track_global_fit() {
        let ds = logit_dataset(1500, 1, |_, _| 1.5);
        // a wide gaussian keeps every weight above exp(-1/2), so each local
        // fit sees nearly the global sample
        let spec = GwFitSpec::new(
            Learner::Logistic,
            KernelSpec {
                shape: crate::kernels::KernelShape::Gaussian,
                bandwidth: Bandwidth::AdaptiveK(1499),
            },
            1,
        );
        let set = fit_gw_auto(&ds, &spec).unwrap();
        let y: Vec<bool> = ds.labels().unwrap().iter().map(|&l| l == 1).collect();
        let global = fit_binary_logistic(&ds.feature_matrix(), &y, &vec![1.0; 1500], DEFAULT_LOCAL_L2).unwrap();
        let surface = extract_coefficients(&set, ds.variable_names()).unwrap();
        assert_eq!(surface.n_skipped, 0);
        for b in surface.coefficients.iter().flatten() {
            for (bj, gj) in b.iter().zip(&global.coefficients[0]) {
                assert!((bj - gj).abs() < 0.15, "{bj} vs {gj}");
            }
        }
    }

    #[test]
    fn sign_flip_is_recovered_locally() {
        let ds = logit_dataset(2000, 2, |x, _| if x < 500.0 { 2.5 } else { -2.5 });
        let set = fit_gw_auto(&ds, &logistic_spec(150)).unwrap();
        let surface = extract_coefficients(&set, ds.variable_names()).unwrap();
        let mut agree = 0;
        let mut total = 0;
        for (u, b) in ds.units().iter().zip(&surface.coefficients) {
            if let Some(b) = b {
                total += 1;
                if (b[0] > 0.0) == (u.x < 500.0) {
                    agree += 1;
                }
            }
        }
        assert!(agree as f64 / total as f64 >= 0.9, "{agree}/{total}");
    }

    #[test]
    fn absent_region_uses_fallback() {
        // class 1 never occurs in the west half
        let mut ds = logit_dataset(400, 3, |_, _| 1.0);
        let labels: Vec<usize> = ds
            .units()
            .iter()
            .map(|u| usize::from(u.x >= 500.0 && u.features[0] > 0.0))
            .collect();
        ds = ds.with_labels(&labels).unwrap();
        let set = fit_gw_auto(&ds, &logistic_spec(30)).unwrap();
        let graph = crate::kernels::build_weighted(&ds, &KernelSpec::adaptive_bisquare(30)).unwrap();
        let positive: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        let mut west_skips = 0;
        for (i, u) in set.units.iter().enumerate() {
            if u.is_skipped() {
                assert_eq!(u.focal_probability, prior_rate(&graph.neighborhoods[i], &positive));
            }
            if ds.units()[i].x < 300.0 {
                assert!(u.is_skipped());
                assert_eq!(u.focal_probability, 0.0);
                west_skips += 1;
            }
        }
        assert!(west_skips > 0);
    }

    #[test]
    fn global_fallback_is_exact() {
        let ds = logit_dataset(200, 4, |_, _| 0.3);
        let mut spec = logistic_spec(20);
        spec.min_positive = 15;
        spec.fallback = Fallback::GlobalModel;
        let set = fit_gw_auto(&ds, &spec).unwrap();
        let x = ds.feature_matrix();
        let y: Vec<bool> = ds.labels().unwrap().iter().map(|&l| l == 1).collect();
        let g = fit_binary_logistic(&x, &y, &vec![1.0; 200], spec.l2_lambda).unwrap();
        assert!(set.n_skipped() > 0);
        for (i, u) in set.units.iter().enumerate() {
            if u.is_skipped() {
                assert_eq!(u.focal_probability, g.positive_probability(&ds.units()[i].features));
            }
        }
    }

    #[test]
    fn graph_mismatch_is_integrity_error() {
        let ds = logit_dataset(100, 5, |_, _| 1.0);
        let other = ds.subset(&(0..90).collect::<Vec<_>>());
        let graph = crate::kernels::build_weighted(&other, &KernelSpec::adaptive_bisquare(20)).unwrap();
        assert!(matches!(fit_gw(&ds, &logistic_spec(20), &graph), Err(Error::Integrity(_))));
    }

    #[test]
    fn perturbation_only_touches_neighbourhoods_containing_the_unit() {
        let ds = logit_dataset(120, 6, |x, _| if x < 500.0 { 1.0 } else { -1.0 });
        let spec = logistic_spec(25);
        let graph = crate::kernels::build_weighted(&ds, &spec.kernel).unwrap();
        let a = fit_gw(&ds, &spec, &graph).unwrap();
        let target = 37;
        let mut units = ds.units().to_vec();
        units[target].features[0] += 3.0;
        let perturbed = SpatialDataset::new(units, ds.variable_names().to_vec(), ds.class_names().to_vec()).unwrap();
        let b = fit_gw(&perturbed, &spec, &graph).unwrap();
        for i in 0..120 {
            let nb = &graph.neighborhoods[i];
            let touches = nb.indices.iter().zip(&nb.weights).any(|(&j, &w)| j == target && w > 0.0);
            if i == target {
                // own features only enter through the focal prediction
                assert_eq!(a.units[i].fit, b.units[i].fit);
            } else if touches {
                continue;
            } else {
                assert_eq!(a.units[i], b.units[i], "unit {i}");
            }
        }
    }

    #[test]
    fn serial_and_parallel_runs_are_identical() {
        let ds = logit_dataset(300, 7, |x, _| x / 500.0 - 1.0);
        for learner in [Learner::Logistic, Learner::Forest] {
            let mut spec = GwFitSpec::new(learner, KernelSpec::adaptive_bisquare(60), 1);
            spec.forest.n_trees = 10;
            let a = crate::exec::with_workers(1, || fit_gw_auto(&ds, &spec)).unwrap();
            let b = crate::exec::with_workers(4, || fit_gw_auto(&ds, &spec)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn duplicated_candidates_tie_to_first() {
        let ds = logit_dataset(300, 8, |_, _| 1.5);
        let folds = spatial_kfold(&ds, 3, FoldMethod::CoordinateClusters, 1).unwrap();
        let spec = logistic_spec(50);
        let cands = [Bandwidth::AdaptiveK(60), Bandwidth::AdaptiveK(60)];
        let sel = select_bandwidth(&ds, &spec, &cands, &folds).unwrap();
        assert_eq!(sel.table[0].f1, sel.table[1].f1);
        assert_eq!(sel.best_index, 0);
        assert!(matches!(
            select_bandwidth(&ds, &spec, &cands[..1], &folds),
            Err(Error::BandwidthSelection(_))
        ));
    }

    #[test]
    fn selection_is_deterministic_on_stationary_data() {
        let ds = logit_dataset(400, 9, |_, _| 1.0);
        let folds = spatial_kfold(&ds, 4, FoldMethod::CoordinateClusters, 2).unwrap();
        let cands = default_candidates(250, 2, 5);
        let a = select_bandwidth(&ds, &logistic_spec(50), &cands, &folds).unwrap();
        let b = select_bandwidth(&ds, &logistic_spec(50), &cands, &folds).unwrap();
        assert_eq!(a, b);
        let scores: Vec<f64> = a.table.iter().filter_map(|r| r.f1).collect();
        let spread = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - scores.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread < 0.1, "{scores:?}");
    }

    #[test]
    fn infeasible_and_all_skip_candidates() {
        let ds = logit_dataset(200, 10, |_, _| 1.0);
        let folds = spatial_kfold(&ds, 2, FoldMethod::CoordinateClusters, 3).unwrap();
        let mut spec = logistic_spec(10);
        let sel = select_bandwidth(&ds, &spec, &[Bandwidth::AdaptiveK(40), Bandwidth::AdaptiveK(199)], &folds).unwrap();
        assert_eq!(sel.table[1].f1, None);
        assert_eq!(sel.best_index, 0);
        spec.min_positive = 10_000;
        assert!(matches!(
            select_bandwidth(&ds, &spec, &[Bandwidth::AdaptiveK(40), Bandwidth::AdaptiveK(50)], &folds),
            Err(Error::BandwidthSelection(_))
        ));
    }

    #[test]
    fn coarse_structure_selects_small_k() {
        // sign of the slope alternates across four vertical strips
        let ds = logit_dataset(1200, 11, |x, _| if ((x / 250.0) as usize).is_multiple_of(2) { 3.0 } else { -3.0 });
        let folds = spatial_kfold(&ds, 5, FoldMethod::CoordinateClusters, 4).unwrap();
        let min_train = (0..5).map(|f| folds.train_indices(f).len()).min().unwrap();
        let cands = default_candidates(min_train, 2, 8);
        let sel = select_bandwidth(&ds, &logistic_spec(50), &cands, &folds).unwrap();
        assert!(sel.best.value() < 600.0, "{:?}", sel.table);
    }

    #[test]
    fn closed_form_summaries() {
        let s = summarize_values("v", &[1.0, -1.0]);
        assert_eq!(s.mean_abs, 1.0);
        assert!((s.sd - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.sign_agreement, 0.5);
        let s = summarize_values("v", &[0.7; 5]);
        assert_eq!(s.sd, 0.0);
    }

    fn surface_with(class_index: usize, sds_from: &[Vec<f64>]) -> CoefficientSurface {
        let p = sds_from[0].len();
        let variables: Vec<String> = (0..p).map(|j| format!("v{j}")).collect();
        let set = GwModelSet {
            class_index,
            class_name: class_index.to_string(),
            learner: Learner::Logistic,
            kernel: KernelSpec::default(),
            variable_names: variables.clone(),
            units: sds_from
                .iter()
                .enumerate()
                .map(|(i, b)| UnitFit {
                    unit_id: format!("u{i}"),
                    fit: LocalFit::Logistic {
                        intercept: 0.0,
                        coefficients: b.clone(),
                        converged: true,
                    },
                    focal_probability: 0.5,
                    n_neighbors: 10,
                    n_positive: 5,
                    bandwidth: 1.0,
                })
                .collect(),
        };
        extract_coefficients(&set, &variables).unwrap()
    }

    #[test]
    fn dispersion_table_closed_forms() {
        let one = surface_with(0, &[vec![1.0], vec![-1.0]]);
        let rows = coefficient_dispersion_by_class(&[one]);
        let s = 2f64.sqrt();
        for v in [rows[0].min, rows[0].q1, rows[0].median, rows[0].q3, rows[0].max] {
            assert!((v - s).abs() < 1e-15);
        }
        let flat = surface_with(1, &vec![vec![0.3, -2.0, 1.0]; 4]);
        let rows = coefficient_dispersion_by_class(&[flat]);
        assert_eq!([rows[0].min, rows[0].q1, rows[0].median, rows[0].q3, rows[0].max], [0.0; 5]);
        assert_eq!(quantile_sorted(&[1.0, 2.0, 3.0, 4.0], 0.25), 1.75);
    }

    #[test]
    fn all_skipped_summaries_survive_json() {
        let set = GwModelSet {
            class_index: 0,
            class_name: "0".into(),
            learner: Learner::Logistic,
            kernel: KernelSpec::default(),
            variable_names: vec!["v0".into()],
            units: vec![UnitFit {
                unit_id: "u0".into(),
                fit: LocalFit::Skipped {
                    reason: SkipReason::BelowMinPositive,
                },
                focal_probability: 0.0,
                n_neighbors: 10,
                n_positive: 0,
                bandwidth: 1.0,
            }],
        };
        let empty = extract_coefficients(&set, &set.variable_names).unwrap();
        let rows = coefficient_dispersion_by_class(std::slice::from_ref(&empty));
        assert!(rows[0].median.is_nan());
        let text = serde_json::to_string(&(&empty.summaries, &rows)).unwrap();
        let (summaries, back): (Vec<VariableSummary>, Vec<DispersionRow>) = serde_json::from_str(&text).unwrap();
        assert!(summaries.iter().all(|s| s.mean_abs.is_nan() && s.sd.is_nan()));
        assert!(back[0].median.is_nan());
    }

    #[test]
    fn ordering_follows_mean_abs() {
        let s = surface_with(0, &[vec![0.1, -3.0, 1.0], vec![0.2, -2.0, 1.5]]);
        assert_eq!(s.order_by_mean_abs, vec!["v1", "v2", "v0"]);
    }

    #[test]
    fn forest_sets_have_no_coefficients() {
        let ds = logit_dataset(150, 12, |_, _| 2.0);
        let mut spec = GwFitSpec::new(Learner::Forest, KernelSpec::adaptive_bisquare(60), 1);
        spec.forest.n_trees = 5;
        let set = fit_gw_auto(&ds, &spec).unwrap();
        assert!(set.units.iter().all(|u| (0.0..=1.0).contains(&u.focal_probability)));
        assert!(matches!(
            extract_coefficients(&set, ds.variable_names()),
            Err(Error::LearnerMismatch(_))
        ));
    }

    #[test]
    fn candidates_are_geometric_and_bounded() {
        let c = default_candidates(1999, 5, 12);
        assert_eq!(c.first(), Some(&Bandwidth::AdaptiveK(30)));
        assert_eq!(c.last(), Some(&Bandwidth::AdaptiveK(1999)));
        assert!(c.windows(2).all(|w| w[0].value() < w[1].value()));
        let c = default_candidates(1999, 10, 12);
        assert_eq!(c[0], Bandwidth::AdaptiveK(50));
    }
}
