//! Neighbour graphs and distance-decay kernels.
//!
//! A [`NeighborGraph`] maps each focal point to an ordered list of source
//! points with distances and weights. For a plain dataset graph focal and
//! source sets coincide and the focal unit is never its own neighbour. Cross
//! graphs (test units against a training split) are built with
//! [`knn_cross`] and [`band_cross`].

mod kdtree;

pub use kdtree::KdTree;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SpatialDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelShape {
    Bisquare,
    Gaussian,
    Tricube,
    Boxcar,
}

impl KernelShape {
    /// Weight of a neighbour at distance `d` under bandwidth `b`.
    pub fn weight(self, d: f64, b: f64) -> f64 {
        let u = d / b;
        match self {
            KernelShape::Bisquare => {
                if u < 1.0 {
                    let t = 1.0 - u * u;
                    t * t
                } else {
                    0.0
                }
            }
            KernelShape::Tricube => {
                if u < 1.0 {
                    let t = 1.0 - u * u * u;
                    t * t * t
                } else {
                    0.0
                }
            }
            KernelShape::Gaussian => (-0.5 * u * u).exp(),
            KernelShape::Boxcar => {
                if d <= b {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Distance (in bandwidths) beyond which fixed-distance neighbourhoods
    /// are truncated.
    fn support(self) -> f64 {
        match self {
            KernelShape::Gaussian => 3.0,
            _ => 1.0,
        }
    }
}

impl std::str::FromStr for KernelShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bisquare" => Ok(Self::Bisquare),
            "gaussian" => Ok(Self::Gaussian),
            "tricube" => Ok(Self::Tricube),
            "boxcar" => Ok(Self::Boxcar),
            other => Err(Error::Config(format!("unknown kernel shape '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum Bandwidth {
    /// Neighbour count `k`; the local bandwidth is the distance to the k-th
    /// neighbour.
    AdaptiveK(usize),
    /// Radius in metres, shared by every focal unit.
    FixedDistance(f64),
}

impl Bandwidth {
    pub fn value(self) -> f64 {
        match self {
            Bandwidth::AdaptiveK(k) => k as f64,
            Bandwidth::FixedDistance(d) => d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub shape: KernelShape,
    pub bandwidth: Bandwidth,
}

impl KernelSpec {
    pub fn adaptive_bisquare(k: usize) -> Self {
        Self {
            shape: KernelShape::Bisquare,
            bandwidth: Bandwidth::AdaptiveK(k),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.bandwidth {
            Bandwidth::AdaptiveK(k) if k < 2 => Err(Error::Bandwidth(format!(
                "adaptive bandwidth must be at least 2 neighbours, got {k}"
            ))),
            Bandwidth::FixedDistance(d) if !(d > 0.0 && d.is_finite()) => Err(Error::Bandwidth(
                format!("fixed bandwidth must be positive, got {d}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn with_bandwidth(self, bandwidth: Bandwidth) -> Self {
        Self { bandwidth, ..self }
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::adaptive_bisquare(50)
    }
}

/// Neighbours of one focal point, sorted by (distance, index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighborhood {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
    pub weights: Vec<f64>,
    /// Local bandwidth in metres (0 until kernel weights are applied).
    pub bandwidth: f64,
}

impl Neighborhood {
    fn from_pairs(pairs: Vec<(usize, f64)>) -> Self {
        let (indices, distances): (Vec<usize>, Vec<f64>) = pairs.into_iter().unzip();
        let weights = vec![1.0; indices.len()];
        Self {
            indices,
            distances,
            weights,
            bandwidth: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborGraph {
    /// Identifiers of the focal points, used in diagnostics.
    pub focal_ids: Vec<String>,
    /// Number of source points neighbour indices refer to.
    pub n_sources: usize,
    pub neighborhoods: Vec<Neighborhood>,
    pub symmetric: bool,
    /// Focal points without any neighbour.
    pub isolated: Vec<usize>,
    /// Bandwidth the graph was built for, if any.
    pub bandwidth: Option<Bandwidth>,
}

impl NeighborGraph {
    pub fn n_focal(&self) -> usize {
        self.neighborhoods.len()
    }

    /// Writes `focal_id,neighbor_id,distance,weight`.
    pub fn write_csv<W: std::io::Write>(&self, source_ids: &[String], writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["focal_id", "neighbor_id", "distance", "weight"])?;
        for (f, nb) in self.neighborhoods.iter().enumerate() {
            for ((&j, &d), &w) in nb.indices.iter().zip(&nb.distances).zip(&nb.weights) {
                wtr.write_record([
                    self.focal_ids[f].as_str(),
                    source_ids[j].as_str(),
                    &crate::data::fmt_f64(d),
                    &crate::data::fmt_f64(w),
                ])?;
            }
        }
        wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

fn ids(dataset: &SpatialDataset) -> Vec<String> {
    dataset.units().iter().map(|u| u.unit_id.clone()).collect()
}

/// k nearest other units for every unit.
pub fn build_knn(dataset: &SpatialDataset, k: usize) -> Result<NeighborGraph> {
    let n = dataset.n_units();
    if k == 0 || k + 1 > n {
        return Err(Error::Bandwidth(format!(
            "k = {k} needs at least {} units, dataset has {n}",
            k + 1
        )));
    }
    let tree = KdTree::new(dataset.coords());
    let neighborhoods: Vec<Neighborhood> = (0..n)
        .into_par_iter()
        .map(|i| Neighborhood::from_pairs(tree.nearest(tree.point(i), k, Some(i))))
        .collect();
    Ok(NeighborGraph {
        focal_ids: ids(dataset),
        n_sources: n,
        neighborhoods,
        symmetric: false,
        isolated: Vec::new(),
        bandwidth: Some(Bandwidth::AdaptiveK(k)),
    })
}

/// k nearest source points for each query point. `exclude[i]` removes one
/// source index from query `i`'s candidates.
pub fn knn_cross(
    sources: &KdTree,
    queries: &[[f64; 2]],
    query_ids: Vec<String>,
    k: usize,
    exclude: Option<&[Option<usize>]>,
) -> Result<NeighborGraph> {
    let available = sources.len() - usize::from(exclude.is_some());
    if k == 0 || k > available {
        return Err(Error::Bandwidth(format!(
            "k = {k} exceeds the {available} available neighbours"
        )));
    }
    let neighborhoods: Vec<Neighborhood> = queries
        .par_iter()
        .enumerate()
        .map(|(i, &q)| {
            let ex = exclude.and_then(|e| e[i]);
            Neighborhood::from_pairs(sources.nearest(q, k, ex))
        })
        .collect();
    Ok(NeighborGraph {
        focal_ids: query_ids,
        n_sources: sources.len(),
        neighborhoods,
        symmetric: false,
        isolated: Vec::new(),
        bandwidth: Some(Bandwidth::AdaptiveK(k)),
    })
}

/// All source points within `radius` of each query point.
pub fn band_cross(
    sources: &KdTree,
    queries: &[[f64; 2]],
    query_ids: Vec<String>,
    radius: f64,
    exclude: Option<&[Option<usize>]>,
) -> NeighborGraph {
    let neighborhoods: Vec<Neighborhood> = queries
        .par_iter()
        .enumerate()
        .map(|(i, &q)| {
            let ex = exclude.and_then(|e| e[i]);
            Neighborhood::from_pairs(sources.within(q, radius, ex))
        })
        .collect();
    let isolated = neighborhoods
        .iter()
        .enumerate()
        .filter(|(_, nb)| nb.is_empty())
        .map(|(i, _)| i)
        .collect();
    NeighborGraph {
        focal_ids: query_ids,
        n_sources: sources.len(),
        neighborhoods,
        symmetric: false,
        isolated,
        bandwidth: Some(Bandwidth::FixedDistance(radius)),
    }
}

/// Applies a distance-decay kernel, returning a graph with weights and local
/// bandwidths filled in.
pub fn kernel_weights(graph: &NeighborGraph, spec: &KernelSpec) -> Result<NeighborGraph> {
    spec.validate()?;
    let mut out = graph.clone();
    for (i, nb) in out.neighborhoods.iter_mut().enumerate() {
        let b = match spec.bandwidth {
            Bandwidth::AdaptiveK(_) => nb.distances.last().copied().unwrap_or(0.0),
            Bandwidth::FixedDistance(d) => d,
        };
        if nb.is_empty() {
            nb.bandwidth = b;
            continue;
        }
        if !(b > 0.0) {
            return Err(Error::DegenerateBandwidth(graph.focal_ids[i].clone()));
        }
        nb.bandwidth = b;
        nb.weights = nb.distances.iter().map(|&d| spec.shape.weight(d, b)).collect();
    }
    out.bandwidth = Some(spec.bandwidth);
    Ok(out)
}

/// Weighted graph over a dataset for the given kernel (focal unit excluded).
pub fn build_weighted(dataset: &SpatialDataset, spec: &KernelSpec) -> Result<NeighborGraph> {
    let tree = KdTree::new(dataset.coords());
    let exclude: Vec<Option<usize>> = (0..dataset.n_units()).map(Some).collect();
    weighted_cross(&tree, &dataset.coords(), ids(dataset), spec, Some(&exclude))
}

/// Weighted cross graph: neighbourhoods of `queries` among `sources`.
pub fn weighted_cross(
    sources: &KdTree,
    queries: &[[f64; 2]],
    query_ids: Vec<String>,
    spec: &KernelSpec,
    exclude: Option<&[Option<usize>]>,
) -> Result<NeighborGraph> {
    spec.validate()?;
    let raw = match spec.bandwidth {
        Bandwidth::AdaptiveK(k) => knn_cross(sources, queries, query_ids, k, exclude)?,
        Bandwidth::FixedDistance(d) => {
            band_cross(sources, queries, query_ids, d * spec.shape.support(), exclude)
        }
    };
    kernel_weights(&raw, spec)
}

/// Binary distance-band graph: weight 1 for `0 < d ≤ d_max`. Units without
/// neighbours are listed in [`NeighborGraph::isolated`].
pub fn build_distance_band(dataset: &SpatialDataset, d_max: f64) -> Result<NeighborGraph> {
    if !(d_max > 0.0 && d_max.is_finite()) {
        return Err(Error::Bandwidth(format!("d_max must be positive, got {d_max}")));
    }
    let coords = dataset.coords();
    let tree = KdTree::new(coords.clone());
    let neighborhoods: Vec<Neighborhood> = coords
        .par_iter()
        .map(|&q| {
            Neighborhood::from_pairs(
                tree.within(q, d_max, None)
                    .into_iter()
                    .filter(|&(_, d)| d > 0.0)
                    .collect(),
            )
        })
        .collect();
    let isolated = neighborhoods
        .iter()
        .enumerate()
        .filter(|(_, nb)| nb.is_empty())
        .map(|(i, _)| i)
        .collect();
    Ok(NeighborGraph {
        focal_ids: ids(dataset),
        n_sources: coords.len(),
        neighborhoods,
        symmetric: true,
        isolated,
        bandwidth: Some(Bandwidth::FixedDistance(d_max)),
    })
}

/// Largest nearest-neighbour distance; a band of this radius leaves no unit
/// isolated.
pub fn max_nearest_neighbor_distance(dataset: &SpatialDataset) -> Result<f64> {
    if dataset.n_units() < 2 {
        return Err(Error::Bandwidth("need at least two units".into()));
    }
    let tree = KdTree::new(dataset.coords());
    Ok((0..dataset.n_units())
        .into_par_iter()
        .map(|i| tree.nearest(tree.point(i), 1, Some(i))[0].1)
        .collect::<Vec<f64>>()
        .into_iter()
        .fold(0.0, f64::max))
}
