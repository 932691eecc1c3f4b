//! Synthetic georeferenced classification data with known, spatially
//! varying coefficients.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, SpatialDataset, UnitRecord};
use crate::error::{Error, Result};
use crate::exec::rng_for;

/// A coefficient as a function of location on the square `[0, extent]²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CoefficientField {
    Constant { value: f64 },
    /// Linear in x from `west` at x = 0 to `east` at x = extent.
    LinearGradient { west: f64, east: f64 },
    /// `+magnitude` west of the centre line, `−magnitude` from it eastwards.
    EastWestSignFlip { magnitude: f64 },
    /// Linear in distance from the centre, `center` there and `edge` at the
    /// corners.
    Radial { center: f64, edge: f64 },
}

impl CoefficientField {
    pub fn at(&self, x: f64, y: f64, extent: f64) -> f64 {
        match *self {
            Self::Constant { value } => value,
            Self::LinearGradient { west, east } => west + (east - west) * (x / extent),
            Self::EastWestSignFlip { magnitude } => {
                if x < extent / 2.0 {
                    magnitude
                } else {
                    -magnitude
                }
            }
            Self::Radial { center, edge } => {
                let h = extent / 2.0;
                let r = ((x - h).powi(2) + (y - h).powi(2)).sqrt() / (h * std::f64::consts::SQRT_2);
                center + (edge - center) * r
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FeatureModel {
    /// Independent standard normal variables.
    Independent,
    /// Each variable loads equally on its own pair of standard normal latent
    /// factors, so variables share factors but no two share both. Pairs are
    /// dealt cyclically so factors are used evenly. Variables stay standard
    /// normal with the given communality.
    PairedFactors { n_factors: usize, communality: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloneSpec {
    /// Zero-based index of the base variable being cloned.
    pub source: usize,
    pub correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_units: usize,
    pub extent: f64,
    pub n_classes: usize,
    pub n_vars: usize,
    /// `n_classes` rows of `n_vars` fields.
    pub fields: Vec<Vec<CoefficientField>>,
    pub intercepts: Vec<f64>,
    pub noise_sd: f64,
    #[serde(default)]
    pub redundancy_plan: Vec<CloneSpec>,
    pub feature_model: FeatureModel,
    pub seed: u64,
}

/// Magnitude of the planted coefficients in the preset specs.
pub const PRESET_MAGNITUDE: f64 = 2.0;

impl SynthSpec {
    /// Class `c ≥ 1` responds to variable `(c − 1) mod p` through `field`;
    /// class 0 is the zero reference.
    pub fn one_variable_per_class(
        n_units: usize,
        n_classes: usize,
        n_vars: usize,
        seed: u64,
        field: CoefficientField,
    ) -> Self {
        let fields = (0..n_classes)
            .map(|c| {
                (0..n_vars)
                    .map(|j| {
                        if c > 0 && j == (c - 1) % n_vars {
                            field
                        } else {
                            CoefficientField::Constant { value: 0.0 }
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            n_units,
            extent: 10_000.0,
            n_classes,
            n_vars,
            fields,
            intercepts: vec![0.0; n_classes],
            noise_sd: 0.0,
            redundancy_plan: Vec::new(),
            feature_model: FeatureModel::Independent,
            seed,
        }
    }

    pub fn stationary(n_units: usize, n_classes: usize, n_vars: usize, seed: u64) -> Self {
        Self::one_variable_per_class(
            n_units,
            n_classes,
            n_vars,
            seed,
            CoefficientField::Constant {
                value: PRESET_MAGNITUDE,
            },
        )
    }

    pub fn sign_flip(n_units: usize, n_classes: usize, n_vars: usize, seed: u64) -> Self {
        Self::one_variable_per_class(
            n_units,
            n_classes,
            n_vars,
            seed,
            CoefficientField::EastWestSignFlip {
                magnitude: PRESET_MAGNITUDE,
            },
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_units < 50 {
            return bad(format!("n_units must be at least 50, got {}", self.n_units));
        }
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2".into());
        }
        if self.n_vars < 1 {
            return bad("n_vars must be at least 1".into());
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return bad("extent must be positive".into());
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad("noise_sd must be non-negative".into());
        }
        if self.fields.len() != self.n_classes || self.fields.iter().any(|r| r.len() != self.n_vars) {
            return bad(format!("fields must be {} × {}", self.n_classes, self.n_vars));
        }
        if self.intercepts.len() != self.n_classes {
            return bad(format!("need {} intercepts", self.n_classes));
        }
        for c in &self.redundancy_plan {
            if c.source >= self.n_vars {
                return bad(format!("clone source {} outside {} variables", c.source, self.n_vars));
            }
            if !(c.correlation > -1.0 && c.correlation <= 1.0) {
                return bad(format!("clone correlation {} outside (-1, 1]", c.correlation));
            }
        }
        if let FeatureModel::PairedFactors { n_factors, communality } = self.feature_model {
            if n_factors < 2 || n_factors * (n_factors - 1) / 2 < self.n_vars {
                return bad(format!("{n_factors} factors give too few distinct pairs for {} variables", self.n_vars));
            }
            if !(communality > 0.0 && communality < 1.0) {
                return bad("communality must lie in (0, 1)".into());
            }
        }
        Ok(())
    }

    pub fn base_variable_names(&self) -> Vec<String> {
        (1..=self.n_vars).map(|j| format!("x{j}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloneRecord {
    pub name: String,
    pub source: String,
    pub correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub base_variables: Vec<String>,
    /// `[unit][class][base variable]`.
    pub coefficients: Vec<Vec<Vec<f64>>>,
    /// Softmax class probabilities per unit, noise included.
    pub probabilities: Vec<Vec<f64>>,
    pub clones: Vec<CloneRecord>,
}

impl GroundTruth {
    /// Writes `unit_id,class,variable,true_coefficient`.
    pub fn write_csv<W: Write>(&self, dataset: &SpatialDataset, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["unit_id", "class", "variable", "true_coefficient"])?;
        for (u, per_class) in dataset.units().iter().zip(&self.coefficients) {
            for (c, row) in per_class.iter().enumerate() {
                for (name, b) in self.base_variables.iter().zip(row) {
                    wtr.write_record([u.unit_id.as_str(), &dataset.class_names()[c], name, &fmt_f64(*b)])?;
                }
            }
        }
        wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, dataset: &SpatialDataset, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(dataset, std::io::BufWriter::new(f))
    }
}

fn softmax(eta: &[f64]) -> Vec<f64> {
    let m = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = eta.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Every distinct factor pair, ordered by cyclic offset `s` and then by
/// first factor `j`: pair `(j, (j + s) mod F)`. Any prefix of length `m·F`
/// (with `m < F/2`) loads each factor on exactly `2m` variables, which keeps
/// every factor's eigenvalue well clear of the Kaiser cut.
fn factor_pairs(n_factors: usize) -> Vec<(usize, usize)> {
    let f = n_factors;
    (1..=f / 2)
        .flat_map(|s| {
            // offset F/2 pairs j with j + F/2, so only half the rotations are new
            let starts = if 2 * s == f { f / 2 } else { f };
            (0..starts).map(move |j| (j, (j + s) % f))
        })
        .collect()
}

/// Draws a dataset and its ground truth. Each ingredient (coordinates,
/// features, clones, noise, labels) has its own random stream.
pub fn generate(spec: &SynthSpec) -> Result<(SpatialDataset, GroundTruth)> {
    spec.validate()?;
    let (n, p, c) = (spec.n_units, spec.n_vars, spec.n_classes);

    let mut rng = rng_for(spec.seed, 0);
    let coords: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random::<f64>() * spec.extent, rng.random::<f64>() * spec.extent))
        .collect();

    let mut rng = rng_for(spec.seed, 1);
    let mut features: Vec<Vec<f64>> = match spec.feature_model {
        FeatureModel::Independent => (0..n)
            .map(|_| (0..p).map(|_| rng.sample(StandardNormal)).collect())
            .collect(),
        FeatureModel::PairedFactors { n_factors, communality } => {
            let pairs = factor_pairs(n_factors);
            let load = (communality / 2.0).sqrt();
            let unique = (1.0 - communality).sqrt();
            (0..n)
                .map(|_| {
                    let f: Vec<f64> = (0..n_factors).map(|_| rng.sample(StandardNormal)).collect();
                    (0..p)
                        .map(|j| {
                            let (a, b) = pairs[j];
                            let e: f64 = rng.sample(StandardNormal);
                            load * (f[a] + f[b]) + unique * e
                        })
                        .collect()
                })
                .collect()
        }
    };

    let base_names = spec.base_variable_names();
    let mut names = base_names.clone();
    let mut clones = Vec::new();
    let mut rng = rng_for(spec.seed, 2);
    for (k, cl) in spec.redundancy_plan.iter().enumerate() {
        let rho = cl.correlation;
        let resid = (1.0 - rho * rho).max(0.0).sqrt();
        for row in features.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            let v = rho * row[cl.source] + resid * e;
            row.push(v);
        }
        let name = format!("{}_clone{}", base_names[cl.source], k + 1);
        names.push(name.clone());
        clones.push(CloneRecord {
            name,
            source: base_names[cl.source].clone(),
            correlation: rho,
        });
    }

    let mut noise_rng = rng_for(spec.seed, 3);
    let mut label_rng = rng_for(spec.seed, 4);
    let mut coefficients = Vec::with_capacity(n);
    let mut probabilities = Vec::with_capacity(n);
    let mut units = Vec::with_capacity(n);
    for i in 0..n {
        let (x, y) = coords[i];
        let beta: Vec<Vec<f64>> = spec
            .fields
            .iter()
            .map(|row| row.iter().map(|f| f.at(x, y, spec.extent)).collect())
            .collect();
        let eta: Vec<f64> = (0..c)
            .map(|k| {
                let noise: f64 = if spec.noise_sd > 0.0 {
                    spec.noise_sd * noise_rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                spec.intercepts[k] + (0..p).map(|j| beta[k][j] * features[i][j]).sum::<f64>() + noise
            })
            .collect();
        let prob = softmax(&eta);
        let u: f64 = label_rng.random();
        let mut acc = 0.0;
        let mut label = c - 1;
        for (k, pk) in prob.iter().enumerate() {
            acc += pk;
            if u < acc {
                label = k;
                break;
            }
        }
        units.push(UnitRecord {
            unit_id: format!("u{i:06}"),
            x,
            y,
            features: features[i].clone(),
            label: Some(label),
        });
        coefficients.push(beta);
        probabilities.push(prob);
    }
    let class_names = (0..c).map(|k| k.to_string()).collect();
    let dataset = SpatialDataset::new(units, names, class_names)?;
    Ok((
        dataset,
        GroundTruth {
            base_variables: base_names,
            coefficients,
            probabilities,
            clones,
        },
    ))
}
