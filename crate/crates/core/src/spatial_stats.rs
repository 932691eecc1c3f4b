//! Getis–Ord global G and local G* with permutation inference.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, SpatialDataset};
use crate::error::{Error, Result};
use crate::exec::rng_for;
use crate::kernels::NeighborGraph;

pub const DEFAULT_PERMUTATIONS: usize = 999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GResult {
    pub g_observed: f64,
    /// `W / (n (n − 1))`, the expectation under random relabelling.
    pub g_expected: f64,
    pub z_score: f64,
    pub p_value: f64,
    pub n_permutations: usize,
    pub permutation_mean: f64,
    pub permutation_sd: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalG {
    pub unit_id: String,
    pub g_star: f64,
    pub z_score: f64,
    pub p_value: f64,
    pub hotspot: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalGResult {
    pub units: Vec<LocalG>,
    pub n_permutations: usize,
    pub significance: f64,
    pub bonferroni: bool,
    /// Threshold actually applied to the pseudo p-values.
    pub effective_level: f64,
    pub seed: u64,
}

impl LocalGResult {
    pub fn n_hotspots(&self) -> usize {
        self.units.iter().filter(|u| u.hotspot).count()
    }

    /// Writes `unit_id,g_star,z,p,flag`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["unit_id", "g_star", "z", "p", "flag"])?;
        for u in &self.units {
            wtr.write_record([
                u.unit_id.as_str(),
                &fmt_f64(u.g_star),
                &fmt_f64(u.z_score),
                &fmt_f64(u.p_value),
                if u.hotspot { "1" } else { "0" },
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

fn check_field(values: &[f64], graph: &NeighborGraph, n_perm: usize) -> Result<()> {
    let n = values.len();
    if graph.n_focal() != n || graph.n_sources != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: graph.n_focal(),
        });
    }
    if n < 3 {
        return Err(Error::InvalidInput("need at least three units".into()));
    }
    if n_perm == 0 {
        return Err(Error::InvalidInput("need at least one permutation".into()));
    }
    if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidInput("values must be finite and non-negative".into()));
    }
    if values.iter().all(|&v| v == values[0]) {
        return Err(Error::DegenerateField("all values are equal; G has no variance".into()));
    }
    Ok(())
}

fn check_binary_symmetric(graph: &NeighborGraph) -> Result<()> {
    if !graph.symmetric {
        return Err(Error::InvalidInput("Getis–Ord G needs a symmetric graph".into()));
    }
    if graph
        .neighborhoods
        .iter()
        .any(|nb| nb.weights.iter().any(|&w| w != 0.0 && w != 1.0))
    {
        return Err(Error::InvalidInput("Getis–Ord G needs binary weights".into()));
    }
    Ok(())
}

/// `Σ_i Σ_{j≠i} w_ij x_i x_j`.
fn cross_sum(values: &[f64], graph: &NeighborGraph) -> f64 {
    let mut s = 0.0;
    for (i, nb) in graph.neighborhoods.iter().enumerate() {
        let mut inner = 0.0;
        for (&j, &w) in nb.indices.iter().zip(&nb.weights) {
            if j != i {
                inner += w * values[j];
            }
        }
        s += values[i] * inner;
    }
    s
}

/// Getis–Ord general G with a one-sided (high-clustering) permutation test.
pub fn global_g(values: &[f64], graph: &NeighborGraph, n_perm: usize, seed: u64) -> Result<GResult> {
    check_field(values, graph, n_perm)?;
    check_binary_symmetric(graph)?;
    let n = values.len();
    let sum: f64 = values.iter().sum();
    let sum_sq: f64 = values.iter().map(|v| v * v).sum();
    let denom = sum * sum - sum_sq;
    if denom <= 0.0 {
        return Err(Error::DegenerateField("at most one non-zero value".into()));
    }
    let g = cross_sum(values, graph) / denom;
    let w_total: f64 = graph
        .neighborhoods
        .iter()
        .enumerate()
        .map(|(i, nb)| {
            nb.indices
                .iter()
                .zip(&nb.weights)
                .filter(|(&j, _)| j != i)
                .map(|(_, &w)| w)
                .sum::<f64>()
        })
        .sum();

    let perms: Vec<f64> = (0..n_perm)
        .into_par_iter()
        .map(|r| {
            let mut shuffled = values.to_vec();
            shuffled.shuffle(&mut rng_for(seed, r as u64));
            cross_sum(&shuffled, graph) / denom
        })
        .collect();
    let at_least = perms.iter().filter(|&&v| v >= g).count();
    let (mean, sd) = crate::evaluation::mean_and_sd(&perms);
    Ok(GResult {
        g_observed: g,
        g_expected: w_total / (n as f64 * (n as f64 - 1.0)),
        z_score: if sd > 0.0 { (g - mean) / sd } else { 0.0 },
        p_value: (at_least + 1) as f64 / (n_perm + 1) as f64,
        n_permutations: n_perm,
        permutation_mean: mean,
        permutation_sd: sd,
        seed,
    })
}

/// `G*_i = (x_i + Σ_{j∈N(i)} w_ij x_j) / Σ_j x_j`.
pub fn g_star_values(values: &[f64], graph: &NeighborGraph) -> Vec<f64> {
    let sum: f64 = values.iter().sum();
    graph
        .neighborhoods
        .iter()
        .enumerate()
        .map(|(i, nb)| {
            let mut num = values[i];
            for (&j, &w) in nb.indices.iter().zip(&nb.weights) {
                if j != i {
                    num += w * values[j];
                }
            }
            num / sum
        })
        .collect()
}

/// Local G* with conditional permutation: each unit keeps its own value
/// while its neighbours' values are redrawn from the other units.
pub fn local_g_star(
    values: &[f64],
    graph: &NeighborGraph,
    n_perm: usize,
    seed: u64,
    significance: f64,
    bonferroni: bool,
) -> Result<LocalGResult> {
    check_field(values, graph, n_perm)?;
    check_binary_symmetric(graph)?;
    if !(significance > 0.0 && significance < 1.0) {
        return Err(Error::InvalidInput("significance must lie in (0, 1)".into()));
    }
    let n = values.len();
    let sum: f64 = values.iter().sum();
    let observed = g_star_values(values, graph);
    let level = if bonferroni { significance / n as f64 } else { significance };

    let units: Vec<LocalG> = (0..n)
        .into_par_iter()
        .map(|i| {
            let nb = &graph.neighborhoods[i];
            let weights: Vec<f64> = nb
                .indices
                .iter()
                .zip(&nb.weights)
                .filter(|(&j, _)| j != i)
                .map(|(_, &w)| w)
                .collect();
            let k = weights.len();
            let mut pool: Vec<f64> = values
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &v)| v)
                .collect();
            let mut rng = rng_for(seed, i as u64);
            let mut perms = Vec::with_capacity(n_perm);
            for _ in 0..n_perm {
                let mut num = values[i];
                // partial Fisher–Yates: the first k slots become a uniform draw
                for (s, w) in weights.iter().enumerate() {
                    let pick = rng.random_range(s..pool.len());
                    pool.swap(s, pick);
                    num += w * pool[s];
                }
                perms.push(num / sum);
            }
            let g = observed[i];
            let larger = perms.iter().filter(|&&v| v >= g).count();
            let smaller = perms.iter().filter(|&&v| v <= g).count();
            let (mean, sd) = crate::evaluation::mean_and_sd(&perms);
            let z = if sd > 0.0 { (g - mean) / sd } else { 0.0 };
            let p = (larger.min(smaller) + 1) as f64 / (n_perm + 1) as f64;
            LocalG {
                unit_id: graph.focal_ids[i].clone(),
                g_star: g,
                z_score: z,
                p_value: p,
                hotspot: z > 0.0 && p < level && k > 0,
            }
        })
        .collect();
    Ok(LocalGResult {
        units,
        n_permutations: n_perm,
        significance,
        bonferroni,
        effective_level: level,
        seed,
    })
}

/// 1 where the predicted class differs from the unit's label, else 0.
pub fn error_surface(predictions: &[usize], dataset: &SpatialDataset) -> Result<Vec<f64>> {
    let labels = dataset.labels()?;
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            found: predictions.len(),
        });
    }
    Ok(predictions
        .iter()
        .zip(&labels)
        .map(|(p, l)| if p == l { 0.0 } else { 1.0 })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::UnitRecord;
    use crate::kernels::{build_distance_band, Neighborhood};

    fn grid(side: usize, values: &[f64]) -> SpatialDataset {
        let units = (0..side * side)
            .map(|i| UnitRecord {
                unit_id: format!("g{i:04}"),
                x: (i % side) as f64,
                y: (i / side) as f64,
                features: vec![values[i]],
                label: Some(0),
            })
            .collect();
        SpatialDataset::new(units, vec!["v".into()], vec!["0".into()]).unwrap()
    }

    fn rook(side: usize) -> NeighborGraph {
        build_distance_band(&grid(side, &vec![0.0; side * side]), 1.0).unwrap()
    }

    fn graph_from(adj: &[Vec<usize>]) -> NeighborGraph {
        NeighborGraph {
            focal_ids: (0..adj.len()).map(|i| i.to_string()).collect(),
            n_sources: adj.len(),
            neighborhoods: adj
                .iter()
                .map(|a| Neighborhood {
                    indices: a.clone(),
                    distances: vec![1.0; a.len()],
                    weights: vec![1.0; a.len()],
                    bandwidth: 1.0,
                })
                .collect(),
            symmetric: true,
            isolated: Vec::new(),
            bandwidth: None,
        }
    }

    #[test]
    fn four_unit_double_sum() {
        // path 0-1-2-3
        let g = graph_from(&[vec![1], vec![0, 2], vec![1, 3], vec![2]]);
        let x = [1.0, 2.0, 3.0, 4.0];
        let w = |i: usize, j: usize| if i.abs_diff(j) == 1 { 1.0 } else { 0.0 };
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    num += w(i, j) * x[i] * x[j];
                    den += x[i] * x[j];
                }
            }
        }
        let r = global_g(&x, &g, 99, 1).unwrap();
        assert!((r.g_observed - num / den).abs() < 1e-12);
        // hand value: 2·(2 + 6 + 12) / (100 − 30)
        assert!((r.g_observed - 40.0 / 70.0).abs() < 1e-12);
        assert!((r.g_expected - 6.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn constant_field_is_degenerate() {
        let g = rook(4);
        assert!(matches!(global_g(&[1.0; 16], &g, 99, 0), Err(Error::DegenerateField(_))));
        assert!(matches!(
            local_g_star(&[0.0; 16], &g, 99, 0, 0.05, false),
            Err(Error::DegenerateField(_))
        ));
    }

    /// Independent permutation oracle using a plain shuffle of index order.
    fn oracle_p(values: &[f64], adj: &[Vec<usize>], n_perm: usize, seed: u64) -> f64 {
        let g = |v: &[f64]| {
            let mut num = 0.0;
            for (i, a) in adj.iter().enumerate() {
                for &j in a {
                    num += v[i] * v[j];
                }
            }
            let s: f64 = v.iter().sum();
            num / (s * s - v.iter().map(|x| x * x).sum::<f64>())
        };
        let obs = g(values);
        let mut rng = rng_for(seed ^ 0xabcdef, 0);
        let mut count = 0;
        for _ in 0..n_perm {
            let mut idx: Vec<usize> = (0..values.len()).collect();
            for i in (1..idx.len()).rev() {
                let j = rng.random_range(0..=i);
                idx.swap(i, j);
            }
            let v: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
            if g(&v) >= obs {
                count += 1;
            }
        }
        (count + 1) as f64 / (n_perm + 1) as f64
    }

    #[test]
    fn clustered_ones_are_significant() {
        let side = 12;
        let mut v = vec![0.0; side * side];
        for &(cx, cy) in &[(2usize, 2usize), (8, 8)] {
            for dy in 0..3 {
                for dx in 0..3 {
                    v[(cy + dy) * side + cx + dx] = 1.0;
                }
            }
        }
        let g = rook(side);
        let r = global_g(&v, &g, 999, 4).unwrap();
        assert!(r.p_value <= 0.01, "{}", r.p_value);
        assert!(r.z_score > 0.0);
        let adj: Vec<Vec<usize>> = g.neighborhoods.iter().map(|nb| nb.indices.clone()).collect();
        assert!(oracle_p(&v, &adj, 999, 4) <= 0.01);
    }

    #[test]
    fn scaling_invariance_and_seed_behaviour() {
        let side = 8;
        let mut rng = rng_for(3, 0);
        let v: Vec<f64> = (0..side * side).map(|_| rng.random::<f64>()).collect();
        let g = rook(side);
        let a = global_g(&v, &g, 199, 10).unwrap();
        let scaled: Vec<f64> = v.iter().map(|x| x * 7.5).collect();
        let b = global_g(&scaled, &g, 199, 10).unwrap();
        assert!((a.g_observed - b.g_observed).abs() < 1e-12);
        let again = global_g(&v, &g, 199, 10).unwrap();
        assert_eq!(a, again);
        let other = global_g(&v, &g, 199, 11).unwrap();
        assert_ne!(a.permutation_mean, other.permutation_mean);
        assert!(a.p_value >= 1.0 / 200.0);
    }

    #[test]
    fn single_one_supports_only_its_band() {
        let side = 5;
        let mut v = vec![0.0; 25];
        v[12] = 1.0;
        let g = rook(side);
        let r = local_g_star(&v, &g, 99, 0, 0.05, false).unwrap();
        let support: Vec<usize> = (0..25).filter(|&i| r.units[i].g_star > 0.0).collect();
        assert_eq!(support, vec![7, 11, 12, 13, 17]);
    }

    #[test]
    fn complete_graph_bookkeeping() {
        let n = 9;
        let adj: Vec<Vec<usize>> = (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect();
        let g = graph_from(&adj);
        let v: Vec<f64> = (0..n).map(|i| (i * i % 7) as f64).collect();
        let total: f64 = g_star_values(&v, &g).iter().sum();
        assert!((total - n as f64).abs() < 1e-12);
    }

    #[test]
    fn planted_block_is_flagged() {
        let side = 20;
        let mut v = vec![0.0; side * side];
        for y in 7..12 {
            for x in 7..12 {
                v[y * side + x] = 1.0;
            }
        }
        let r = local_g_star(&v, &rook(side), 999, 8, 0.05, false).unwrap();
        let block: Vec<usize> = (0..side * side).filter(|&i| v[i] == 1.0).collect();
        let flagged = block.iter().filter(|&&i| r.units[i].hotspot).count();
        assert!(flagged as f64 >= 0.8 * block.len() as f64, "{flagged}");
    }

    #[test]
    fn uniform_field_flags_near_nominal_rate() {
        let side = 20;
        let mut rng = rng_for(21, 0);
        let v: Vec<f64> = (0..side * side).map(|_| rng.random::<f64>()).collect();
        let r = local_g_star(&v, &rook(side), 999, 5, 0.05, false).unwrap();
        let rate = r.n_hotspots() as f64 / 400.0;
        assert!(rate <= 0.07, "{rate}");
        for u in &r.units {
            assert_eq!(u.hotspot, u.z_score > 0.0 && u.p_value < 0.05);
            assert!(u.p_value >= 1.0 / 1000.0);
        }
        let b = local_g_star(&v, &rook(side), 999, 5, 0.05, true).unwrap();
        assert!(b.n_hotspots() <= r.n_hotspots());
        assert!(b.units.iter().all(|u| !u.hotspot || u.p_value < 0.05 / 400.0));
    }

    #[test]
    fn error_surface_cases() {
        let units = (0..6)
            .map(|i| UnitRecord {
                unit_id: format!("u{i}"),
                x: i as f64,
                y: 0.0,
                features: vec![0.0],
                label: Some(i % 3),
            })
            .collect();
        let ds = SpatialDataset::new(units, vec!["f".into()], vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let labels = ds.labels().unwrap();
        assert_eq!(error_surface(&labels, &ds).unwrap(), vec![0.0; 6]);
        let wrong: Vec<usize> = labels.iter().map(|l| (l + 1) % 3).collect();
        assert_eq!(error_surface(&wrong, &ds).unwrap(), vec![1.0; 6]);
        assert_eq!(
            error_surface(&[0, 0, 2, 1, 1, 0], &ds).unwrap(),
            vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]
        );
        assert!(error_surface(&[0, 1], &ds).is_err());
    }
}
