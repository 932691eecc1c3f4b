//! Automated variable selection: manual exclusion, factor-analysis
//! communality filtering, and minimum-spanning-tree pruning of highly
//! correlated pairs.

mod factor;
mod mst;

pub use factor::{fit_from_correlation, sorted_eigen, FactorModel};
pub use mst::{kruskal_mst, mst_prune, tree_weight, MstEdge, MstPrune, PairRemoval, UnionFind};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::SpatialDataset;
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.75;

/// Absolute slack when comparing a communality with the mean communality,
/// so that equal communalities are never split by rounding in the mean.
pub const COMMUNALITY_SLACK: f64 = 1e-9;

/// Pearson correlation of two equal-length samples.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    sab / (saa * sbb).sqrt()
}

/// Pearson correlation matrix of the dataset's features.
pub fn correlation_matrix(dataset: &SpatialDataset) -> Result<DMatrix<f64>> {
    let n = dataset.n_units();
    let p = dataset.n_variables();
    if n < 2 {
        return Err(Error::InvalidInput("correlation needs at least two units".into()));
    }
    let x = dataset.feature_matrix();
    let mut z = DMatrix::zeros(n, p);
    for j in 0..p {
        let col = x.column(j);
        let mean = col.sum() / n as f64;
        let norm = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
        let spread = col.iter().fold(0.0f64, |m, v| m.max((v - mean).abs()));
        if !(norm > 0.0) || spread <= 1e-12 * mean.abs().max(1.0) {
            return Err(Error::DegenerateVariable(dataset.variable_names()[j].clone()));
        }
        for i in 0..n {
            z[(i, j)] = (col[i] - mean) / norm;
        }
    }
    let mut r = z.transpose() * &z;
    for i in 0..p {
        r[(i, i)] = 1.0;
        for j in i + 1..p {
            let v = r[(i, j)].clamp(-1.0, 1.0);
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    Ok(r)
}

/// Factor model of the dataset's correlation matrix.
pub fn fit_factor_model(dataset: &SpatialDataset) -> Result<FactorModel> {
    if !dataset.is_standardized() {
        return Err(Error::InvalidInput("factor analysis expects standardised features".into()));
    }
    if dataset.n_variables() < 2 {
        return Err(Error::InvalidInput("factor analysis needs at least two variables".into()));
    }
    let corr = correlation_matrix(dataset)?;
    let mut model = fit_from_correlation(&corr);
    if dataset.n_units() <= dataset.n_variables() {
        model.warnings.push(format!(
            "only {} units for {} variables",
            dataset.n_units(),
            dataset.n_variables()
        ));
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunalityRemoval {
    pub variable: String,
    pub communality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunalityFilter {
    pub mean_communality: f64,
    pub kept: Vec<String>,
    pub removed: Vec<CommunalityRemoval>,
}

/// Keeps variables whose communality is not below the mean communality.
pub fn communality_filter(model: &FactorModel, variables: &[String]) -> CommunalityFilter {
    let mean = model.mean_communality;
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for (name, &c) in variables.iter().zip(&model.communalities) {
        if c >= mean - COMMUNALITY_SLACK {
            kept.push(name.clone());
        } else {
            removed.push(CommunalityRemoval {
                variable: name.clone(),
                communality: c,
            });
        }
    }
    CommunalityFilter {
        mean_communality: mean,
        kept,
        removed,
    }
}

/// Full record of a variable-selection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub input_variables: Vec<String>,
    pub manually_excluded: Vec<String>,
    pub eigenvalues: Vec<f64>,
    pub n_factors: usize,
    pub communalities: Vec<CommunalityRemoval>,
    pub mean_communality: f64,
    pub factor_converged: bool,
    pub factor_warnings: Vec<String>,
    pub stage1_removed: Vec<CommunalityRemoval>,
    pub threshold: f64,
    pub mst_edges: Vec<MstEdge>,
    pub mst_total_weight: f64,
    pub high_corr_pairs: Vec<MstEdge>,
    pub stage2_removed: Vec<PairRemoval>,
    pub retained_variables: Vec<String>,
}

impl SelectionTrace {
    /// Structural checks a reloaded trace must satisfy.
    pub fn validate(&self) -> Result<()> {
        let mut expected: Vec<&String> = self
            .input_variables
            .iter()
            .filter(|v| !self.manually_excluded.contains(v))
            .filter(|v| !self.stage1_removed.iter().any(|r| &r.variable == *v))
            .filter(|v| !self.stage2_removed.iter().any(|r| &r.removed == *v))
            .collect();
        let mut got: Vec<&String> = self.retained_variables.iter().collect();
        expected.sort();
        got.sort();
        if expected != got {
            return Err(Error::Integrity(
                "retained variables do not equal inputs minus removals".into(),
            ));
        }
        if self.n_factors == 0 || self.n_factors > self.eigenvalues.len() {
            return Err(Error::Integrity("invalid factor count".into()));
        }
        Ok(())
    }
}

pub fn select_variables(dataset: &SpatialDataset, exclusions: &[String]) -> Result<SelectionTrace> {
    select_variables_with(dataset, exclusions, DEFAULT_THRESHOLD)
}

/// Runs manual exclusion, the communality filter and MST pruning in order.
pub fn select_variables_with(
    dataset: &SpatialDataset,
    exclusions: &[String],
    threshold: f64,
) -> Result<SelectionTrace> {
    if !dataset.is_standardized() {
        return Err(Error::InvalidInput("variable selection expects standardised features".into()));
    }
    for e in exclusions {
        if dataset.variable_index(e).is_none() {
            return Err(Error::Schema(format!("excluded variable '{e}' not in dataset")));
        }
    }
    let candidates: Vec<String> = dataset
        .variable_names()
        .iter()
        .filter(|v| !exclusions.contains(v))
        .cloned()
        .collect();
    let stage0 = dataset.select_variables(&candidates)?;
    let model = fit_factor_model(&stage0)?;
    let filter = communality_filter(&model, &candidates);

    let stage1 = stage0.select_variables(&filter.kept)?;
    let prune = if filter.kept.len() >= 2 {
        mst_prune(&correlation_matrix(&stage1)?, &filter.kept, threshold)
    } else {
        mst_prune(&DMatrix::identity(filter.kept.len(), filter.kept.len()), &filter.kept, threshold)
    };

    Ok(SelectionTrace {
        input_variables: dataset.variable_names().to_vec(),
        manually_excluded: exclusions.to_vec(),
        eigenvalues: model.eigenvalues.clone(),
        n_factors: model.n_factors,
        communalities: candidates
            .iter()
            .zip(&model.communalities)
            .map(|(v, &c)| CommunalityRemoval {
                variable: v.clone(),
                communality: c,
            })
            .collect(),
        mean_communality: model.mean_communality,
        factor_converged: model.converged,
        factor_warnings: model.warnings.clone(),
        stage1_removed: filter.removed,
        threshold,
        mst_edges: prune.mst_edges,
        mst_total_weight: prune.mst_total_weight,
        high_corr_pairs: prune.high_corr_pairs,
        stage2_removed: prune.removed,
        retained_variables: prune.retained,
    })
}
