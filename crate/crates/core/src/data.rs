//! Georeferenced dataset: units with coordinates, features and a categorical
//! label, plus CSV ingestion, majority-vote label aggregation and feature
//! standardisation.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One spatial unit. Coordinates are projected planar metres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub unit_id: String,
    pub x: f64,
    pub y: f64,
    pub features: Vec<f64>,
    /// Class index into [`SpatialDataset::class_names`]. `None` until labels
    /// are attached (for instance by [`aggregate_majority`]).
    pub label: Option<usize>,
}

/// Mean and sample standard deviation removed from one feature column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaling {
    pub variable: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialDataset {
    units: Vec<UnitRecord>,
    variable_names: Vec<String>,
    class_names: Vec<String>,
    standardized: bool,
    scaling: Vec<ColumnScaling>,
}

impl SpatialDataset {
    /// Builds a dataset and checks every structural invariant.
    pub fn new(
        units: Vec<UnitRecord>,
        variable_names: Vec<String>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        check_unique(&variable_names, "variable name")?;
        check_unique(&class_names, "class name")?;
        let mut seen = HashSet::with_capacity(units.len());
        for u in &units {
            if !seen.insert(u.unit_id.as_str()) {
                return Err(Error::Integrity(format!("duplicate unit_id '{}'", u.unit_id)));
            }
            if !u.x.is_finite() || !u.y.is_finite() {
                return Err(Error::Integrity(format!(
                    "unit '{}' has non-finite coordinates",
                    u.unit_id
                )));
            }
            if u.features.len() != variable_names.len() {
                return Err(Error::Integrity(format!(
                    "unit '{}' has {} features, expected {}",
                    u.unit_id,
                    u.features.len(),
                    variable_names.len()
                )));
            }
            if let Some(l) = u.label {
                if l >= class_names.len() {
                    return Err(Error::Integrity(format!(
                        "unit '{}' has label {} but only {} classes exist",
                        u.unit_id,
                        l,
                        class_names.len()
                    )));
                }
            }
        }
        Ok(Self {
            units,
            variable_names,
            class_names,
            standardized: false,
            scaling: Vec::new(),
        })
    }

    pub fn units(&self) -> &[UnitRecord] {
        &self.units
    }

    pub fn variable_names(&self) -> &[String] {
        &self.variable_names
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    pub fn scaling(&self) -> &[ColumnScaling] {
        &self.scaling
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn n_variables(&self) -> usize {
        self.variable_names.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn coords(&self) -> Vec<[f64; 2]> {
        self.units.iter().map(|u| [u.x, u.y]).collect()
    }

    /// n × p feature matrix in unit order.
    pub fn feature_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.units.len(), self.variable_names.len(), |i, j| {
            self.units[i].features[j]
        })
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.units.iter().map(|u| u.features[j]).collect()
    }

    /// All labels, failing if any unit is still unlabelled.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.units
            .iter()
            .map(|u| {
                u.label.ok_or_else(|| {
                    Error::Integrity(format!("unit '{}' has no label", u.unit_id))
                })
            })
            .collect()
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variable_names.iter().position(|v| v == name)
    }

    /// Keeps only the named variables, in the given order.
    pub fn select_variables(&self, names: &[String]) -> Result<SpatialDataset> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.variable_index(n)
                    .ok_or_else(|| Error::Schema(format!("unknown variable '{n}'")))
            })
            .collect::<Result<_>>()?;
        let units = self
            .units
            .iter()
            .map(|u| UnitRecord {
                features: idx.iter().map(|&j| u.features[j]).collect(),
                ..u.clone()
            })
            .collect();
        let mut out = SpatialDataset::new(units, names.to_vec(), self.class_names.clone())?;
        out.standardized = self.standardized;
        out.scaling = idx
            .iter()
            .filter_map(|&j| self.scaling.get(j).cloned())
            .collect();
        Ok(out)
    }

    /// Subset of units by index, preserving the given order.
    pub fn subset(&self, indices: &[usize]) -> SpatialDataset {
        SpatialDataset {
            units: indices.iter().map(|&i| self.units[i].clone()).collect(),
            variable_names: self.variable_names.clone(),
            class_names: self.class_names.clone(),
            standardized: self.standardized,
            scaling: self.scaling.clone(),
        }
    }

    /// Replaces every label. Used by label-shuffling baselines.
    pub fn with_labels(&self, labels: &[usize]) -> Result<SpatialDataset> {
        if labels.len() != self.units.len() {
            return Err(Error::DimensionMismatch {
                expected: self.units.len(),
                found: labels.len(),
            });
        }
        let units = self
            .units
            .iter()
            .zip(labels)
            .map(|(u, &l)| UnitRecord {
                label: Some(l),
                ..u.clone()
            })
            .collect();
        let mut out = SpatialDataset::new(units, self.variable_names.clone(), self.class_names.clone())?;
        out.standardized = self.standardized;
        out.scaling = self.scaling.clone();
        Ok(out)
    }
}

fn check_unique(names: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(Error::Integrity(format!("duplicate {what} '{n}'")));
        }
    }
    Ok(())
}

/// Column mapping for a unit-level CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSchema {
    pub id_column: String,
    pub x_column: String,
    pub y_column: String,
    pub label_column: Option<String>,
    /// Explicit feature columns. `None` takes every unmapped column.
    pub feature_columns: Option<Vec<String>>,
}

impl Default for UnitSchema {
    fn default() -> Self {
        Self {
            id_column: "id".into(),
            x_column: "x".into(),
            y_column: "y".into(),
            label_column: Some("label".into()),
            feature_columns: None,
        }
    }
}

fn header_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
}

fn parse_finite(cell: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("'{cell}' is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("'{cell}' is not finite"),
        });
    }
    Ok(v)
}

/// Sorted distinct label strings. Integer-valued labels sort numerically.
fn class_names_from(labels: &[String]) -> Vec<String> {
    let mut distinct: Vec<String> = labels
        .iter()
        .cloned()
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    if distinct.iter().all(|s| s.parse::<i64>().is_ok()) {
        distinct.sort_by_key(|s| s.parse::<i64>().unwrap());
    } else {
        distinct.sort();
    }
    distinct
}

pub fn load_units_csv(path: &Path, schema: &UnitSchema) -> Result<SpatialDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_units_csv(file, schema)
}

pub fn read_units_csv<R: std::io::Read>(reader: R, schema: &UnitSchema) -> Result<SpatialDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let id_col = header_index(&headers, &schema.id_column)?;
    let x_col = header_index(&headers, &schema.x_column)?;
    let y_col = header_index(&headers, &schema.y_column)?;
    let label_col = match &schema.label_column {
        Some(name) => Some(header_index(&headers, name)?),
        None => None,
    };
    let feature_names: Vec<String> = match &schema.feature_columns {
        Some(cols) => cols.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != id_col && *i != x_col && *i != y_col && Some(*i) != label_col)
            .map(|(_, h)| h.to_string())
            .collect(),
    };
    if feature_names.is_empty() {
        return Err(Error::Schema("no feature columns".into()));
    }
    let feature_cols: Vec<usize> = feature_names
        .iter()
        .map(|n| header_index(&headers, n))
        .collect::<Result<_>>()?;

    let mut units = Vec::new();
    let mut raw_labels = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // 1-based data row, header excluded
        let row = r + 1;
        let cell = |i: usize| rec.get(i).unwrap_or("");
        let x = parse_finite(cell(x_col), row, &schema.x_column)?;
        let y = parse_finite(cell(y_col), row, &schema.y_column)?;
        let features = feature_cols
            .iter()
            .zip(&feature_names)
            .map(|(&c, name)| parse_finite(cell(c), row, name))
            .collect::<Result<Vec<_>>>()?;
        if let Some(lc) = label_col {
            let l = cell(lc).trim().to_string();
            if l.is_empty() {
                return Err(Error::Parse {
                    row,
                    column: schema.label_column.clone().unwrap_or_default(),
                    message: "empty label".into(),
                });
            }
            raw_labels.push(l);
        }
        units.push(UnitRecord {
            unit_id: cell(id_col).to_string(),
            x,
            y,
            features,
            label: None,
        });
    }

    let class_names = if label_col.is_some() {
        let names = class_names_from(&raw_labels);
        let lookup: HashMap<&str, usize> =
            names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        for (u, l) in units.iter_mut().zip(&raw_labels) {
            u.label = Some(lookup[l.as_str()]);
        }
        names
    } else {
        Vec::new()
    };
    SpatialDataset::new(units, feature_names, class_names)
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `id,x,y,<features...>[,label]`; labels are written as class names.
pub fn write_units_csv<W: Write>(dataset: &SpatialDataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let has_labels = dataset.units.iter().any(|u| u.label.is_some());
    let mut header = vec!["id".to_string(), "x".into(), "y".into()];
    header.extend(dataset.variable_names.iter().cloned());
    if has_labels {
        header.push("label".into());
    }
    wtr.write_record(&header)?;
    for u in &dataset.units {
        let mut row = vec![u.unit_id.clone(), fmt_f64(u.x), fmt_f64(u.y)];
        row.extend(u.features.iter().map(|&v| fmt_f64(v)));
        if has_labels {
            row.push(
                u.label
                    .map(|l| dataset.class_names[l].clone())
                    .unwrap_or_default(),
            );
        }
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn save_units_csv(dataset: &SpatialDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_units_csv(dataset, std::io::BufWriter::new(file))
}

/// Element-level labels (e.g. buildings) keyed to the unit they fall in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementLabelTable {
    pub rows: Vec<ElementRow>,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementRow {
    pub element_id: String,
    pub unit_id: String,
    pub label: usize,
}

/// Reads `element_id,unit_id,label`.
pub fn read_elements_csv<R: std::io::Read>(reader: R) -> Result<ElementLabelTable> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let e_col = header_index(&headers, "element_id")?;
    let u_col = header_index(&headers, "unit_id")?;
    let l_col = header_index(&headers, "label")?;
    let mut raw = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        raw.push((
            rec.get(e_col).unwrap_or("").to_string(),
            rec.get(u_col).unwrap_or("").to_string(),
            rec.get(l_col).unwrap_or("").trim().to_string(),
        ));
    }
    let labels: Vec<String> = raw.iter().map(|r| r.2.clone()).collect();
    let class_names = class_names_from(&labels);
    let lookup: HashMap<&str, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let rows = raw
        .iter()
        .map(|(e, u, l)| ElementRow {
            element_id: e.clone(),
            unit_id: u.clone(),
            label: lookup[l.as_str()],
        })
        .collect();
    Ok(ElementLabelTable { rows, class_names })
}

pub fn load_elements_csv(path: &Path) -> Result<ElementLabelTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_elements_csv(file)
}

/// Result of [`aggregate_majority`]: the labelled dataset and the ids of
/// units that received no element and were dropped.
#[derive(Debug, Clone)]
pub struct Aggregation {
    pub dataset: SpatialDataset,
    pub dropped_units: Vec<String>,
}

/// Labels each unit with the modal label of its elements; ties go to the
/// smallest class index. Units without elements are dropped.
pub fn aggregate_majority(
    elements: &ElementLabelTable,
    dataset: &SpatialDataset,
) -> Result<Aggregation> {
    let n_classes = elements.class_names.len();
    let index: HashMap<&str, usize> = dataset
        .units
        .iter()
        .enumerate()
        .map(|(i, u)| (u.unit_id.as_str(), i))
        .collect();
    let mut counts = vec![vec![0usize; n_classes]; dataset.units.len()];
    for row in &elements.rows {
        let &ui = index.get(row.unit_id.as_str()).ok_or_else(|| {
            Error::Integrity(format!(
                "element '{}' references unknown unit '{}'",
                row.element_id, row.unit_id
            ))
        })?;
        if row.label >= n_classes {
            return Err(Error::Integrity(format!(
                "element '{}' has label {} outside {} classes",
                row.element_id, row.label, n_classes
            )));
        }
        counts[ui][row.label] += 1;
    }
    let mut units = Vec::with_capacity(dataset.units.len());
    let mut dropped = Vec::new();
    for (u, c) in dataset.units.iter().zip(&counts) {
        let total: usize = c.iter().sum();
        if total == 0 {
            dropped.push(u.unit_id.clone());
            continue;
        }
        // max_by_key keeps the last maximum, so scan manually for the first
        let mut best = 0;
        for k in 1..n_classes {
            if c[k] > c[best] {
                best = k;
            }
        }
        units.push(UnitRecord {
            label: Some(best),
            ..u.clone()
        });
    }
    let mut out = SpatialDataset::new(
        units,
        dataset.variable_names.clone(),
        elements.class_names.clone(),
    )?;
    out.standardized = dataset.standardized;
    out.scaling = dataset.scaling.clone();
    Ok(Aggregation {
        dataset: out,
        dropped_units: dropped,
    })
}

/// Reads a float that JSON may hold as `null`, because serde_json writes
/// NaN that way.
pub fn f64_or_nan<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// Column mean and sample standard deviation (n − 1 denominator).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let sd = if values.len() > 1 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, sd)
}

/// Centres every column and scales it to unit sample standard deviation.
///
/// Applying this to an already standardised dataset is a numerical no-op; the
/// scaling record of the first application is kept.
pub fn standardize_features(dataset: &SpatialDataset) -> Result<SpatialDataset> {
    let p = dataset.variable_names.len();
    let mut scaling = Vec::with_capacity(p);
    for j in 0..p {
        let col = dataset.column(j);
        let (mean, sd) = mean_sd(&col);
        let spread = col.iter().fold(0.0f64, |m, v| m.max((v - mean).abs()));
        if !(sd > 0.0) || spread <= 1e-12 * mean.abs().max(1.0) {
            return Err(Error::DegenerateVariable(dataset.variable_names[j].clone()));
        }
        scaling.push(ColumnScaling {
            variable: dataset.variable_names[j].clone(),
            mean,
            sd,
        });
    }
    let units = dataset
        .units
        .iter()
        .map(|u| UnitRecord {
            features: u
                .features
                .iter()
                .zip(&scaling)
                .map(|(v, s)| (v - s.mean) / s.sd)
                .collect(),
            ..u.clone()
        })
        .collect();
    Ok(SpatialDataset {
        units,
        variable_names: dataset.variable_names.clone(),
        class_names: dataset.class_names.clone(),
        standardized: true,
        scaling: if dataset.standardized {
            dataset.scaling.clone()
        } else {
            scaling
        },
    })
}
