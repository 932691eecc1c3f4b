//! Stage driver behind the command-line tool: configuration, one function per
//! stage, and the files each stage exchanges through the output directory.
//!
//! Every random choice derives from `run.seed` through a fixed stream number
//! per stage, so reruns with one config are byte-identical.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{
    aggregate_majority, load_elements_csv, load_units_csv, save_units_csv, standardize_features,
    SpatialDataset, UnitSchema,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_global, evaluate_gw, spatial_kfold, FoldAssignment, FoldMethod, GlobalModelKind, GlobalSettings,
    GwScoreReport, ScoreReport,
};
use crate::exec::{derive_seed, with_workers};
use crate::forest::ForestParams;
use crate::gw::{
    coefficient_dispersion_by_class, default_candidates, extract_coefficients, fit_gw_auto, select_bandwidth,
    BandwidthSelection, DispersionRow, Fallback, GwFitSpec, Learner, VariableSummary, DEFAULT_MIN_POSITIVE,
    DEFAULT_N_CANDIDATES,
};
use crate::kernels::{build_distance_band, max_nearest_neighbor_distance, Bandwidth, KernelShape, KernelSpec};
use crate::linear::DEFAULT_LOCAL_L2;
use crate::spatial_stats::{error_surface, global_g, local_g_star, GResult, DEFAULT_PERMUTATIONS};
use crate::synth::{generate, CloneSpec, FeatureModel, SynthSpec};
use crate::varsel::{select_variables_with, SelectionTrace, DEFAULT_THRESHOLD};

// Seed streams per stage.
const STREAM_SYNTH: u64 = 1;
const STREAM_FOLDS: u64 = 2;
const STREAM_GLOBAL_FOREST: u64 = 3;
const STREAM_GW_FOREST: u64 = 4;
const STREAM_AUTOCORR_GLOBAL: u64 = 5;
const STREAM_AUTOCORR_LOCAL: u64 = 6;

pub const SYNTH_UNITS: &str = "synth_units.csv";
pub const SYNTH_TRUTH: &str = "synth_truth.csv";
pub const SELECTION_TRACE: &str = "selection_trace.json";
pub const GLOBAL_SCORES: &str = "global_scores.json";
pub const AUTOCORR_GLOBAL: &str = "autocorr_global.json";
pub const AUTOCORR_LOCAL: &str = "autocorr_local.csv";
pub const GW_SCORES: &str = "gw_scores.json";
pub const GW_DISPERSION: &str = "gw_dispersion.json";
pub const REPORT: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    SelectVars,
    FitGlobal,
    Autocorr,
    FitGw,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::SelectVars => "select-vars",
            Command::FitGlobal => "fit-global",
            Command::Autocorr => "autocorr",
            Command::FitGw => "fit-gw",
            Command::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Root of every random stream. Mandatory.
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputSection {
    /// Unit table. Defaults to the synth stage's output.
    pub units: Option<PathBuf>,
    /// Optional element table (`element_id,unit_id,label`) whose majority
    /// label replaces the unit labels.
    pub elements: Option<PathBuf>,
    pub id_column: String,
    pub x_column: String,
    pub y_column: String,
    pub label_column: Option<String>,
    pub feature_columns: Option<Vec<String>>,
    pub standardize: bool,
}

impl Default for InputSection {
    fn default() -> Self {
        let schema = UnitSchema::default();
        Self {
            units: None,
            elements: None,
            id_column: schema.id_column,
            x_column: schema.x_column,
            y_column: schema.y_column,
            label_column: schema.label_column,
            feature_columns: schema.feature_columns,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthPreset {
    SignFlip,
    Stationary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub preset: SynthPreset,
    pub n_units: usize,
    pub n_classes: usize,
    pub n_vars: usize,
    pub noise_sd: f64,
    pub clones: Vec<CloneSpec>,
    pub feature_model: FeatureModel,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            preset: SynthPreset::SignFlip,
            n_units: 500,
            n_classes: 3,
            n_vars: 5,
            noise_sd: 0.0,
            clones: Vec::new(),
            feature_model: FeatureModel::Independent,
        }
    }
}

impl SynthSection {
    pub fn to_spec(&self, seed: u64) -> SynthSpec {
        let mut spec = match self.preset {
            SynthPreset::SignFlip => SynthSpec::sign_flip(self.n_units, self.n_classes, self.n_vars, seed),
            SynthPreset::Stationary => SynthSpec::stationary(self.n_units, self.n_classes, self.n_vars, seed),
        };
        spec.noise_sd = self.noise_sd;
        spec.redundancy_plan = self.clones.clone();
        spec.feature_model = self.feature_model;
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectSection {
    pub exclusions: Vec<String>,
    pub threshold: f64,
    /// Later stages use only the variables retained by `select-vars`.
    pub restrict_to_selection: bool,
}

impl Default for SelectSection {
    fn default() -> Self {
        Self {
            exclusions: Vec::new(),
            threshold: DEFAULT_THRESHOLD,
            restrict_to_selection: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoldsSection {
    pub n_folds: usize,
    pub method: FoldMethod,
}

impl Default for FoldsSection {
    fn default() -> Self {
        Self {
            n_folds: crate::evaluation::DEFAULT_FOLDS,
            method: FoldMethod::CoordinateClusters,
        }
    }
}

/// Forest settings without a seed; seeds come from `run.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestSection {
    pub n_trees: usize,
    pub max_depth: usize,
    pub mtry: Option<usize>,
    pub min_leaf_weight: f64,
}

impl Default for ForestSection {
    fn default() -> Self {
        let p = ForestParams::default();
        Self {
            n_trees: p.n_trees,
            max_depth: p.max_depth,
            mtry: p.mtry,
            min_leaf_weight: p.min_leaf_weight,
        }
    }
}

impl ForestSection {
    pub fn params(&self, seed: u64) -> ForestParams {
        ForestParams {
            n_trees: self.n_trees,
            max_depth: self.max_depth,
            mtry: self.mtry,
            min_leaf_weight: self.min_leaf_weight,
            seed,
            ..ForestParams::default()
        }
    }

    /// Checks everything except `mtry <= p`, which needs the data.
    fn check(&self, section: &str) -> Result<()> {
        self.params(0)
            .validate(usize::MAX)
            .map_err(|e| Error::Config(format!("{section}: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalSection {
    pub l2_lambda: f64,
    pub forest: ForestSection,
}

impl Default for GlobalSection {
    fn default() -> Self {
        Self {
            l2_lambda: DEFAULT_LOCAL_L2,
            forest: ForestSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthMode {
    Adaptive,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GwSection {
    pub learners: Vec<Learner>,
    pub kernel: KernelShape,
    pub bandwidth_mode: BandwidthMode,
    /// Explicit candidates (k for adaptive, metres for fixed). Empty means a
    /// geometric grid of `n_candidates` adaptive values.
    pub candidates: Vec<f64>,
    pub n_candidates: usize,
    pub min_positive: usize,
    pub fallback: Fallback,
    pub l2_lambda: f64,
    pub threshold: f64,
    pub forest: ForestSection,
}

impl Default for GwSection {
    fn default() -> Self {
        Self {
            learners: vec![Learner::Logistic, Learner::Forest],
            kernel: KernelShape::Bisquare,
            bandwidth_mode: BandwidthMode::Adaptive,
            candidates: Vec::new(),
            n_candidates: DEFAULT_N_CANDIDATES,
            min_positive: DEFAULT_MIN_POSITIVE,
            fallback: Fallback::PriorRate,
            l2_lambda: DEFAULT_LOCAL_L2,
            threshold: 0.5,
            forest: ForestSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutocorrSection {
    /// Which global learner's error surface to test.
    pub learner: GlobalModelKind,
    pub n_permutations: usize,
    /// Distance band; defaults to the largest nearest-neighbour distance.
    pub d_max: Option<f64>,
    pub significance: f64,
    pub bonferroni: bool,
}

impl Default for AutocorrSection {
    fn default() -> Self {
        Self {
            learner: GlobalModelKind::Forest,
            n_permutations: DEFAULT_PERMUTATIONS,
            d_max: None,
            significance: 0.05,
            bonferroni: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub run: RunSection,
    #[serde(default)]
    pub input: InputSection,
    pub synth: Option<SynthSection>,
    #[serde(default)]
    pub select: SelectSection,
    #[serde(default)]
    pub folds: FoldsSection,
    #[serde(default)]
    pub global: GlobalSection,
    #[serde(default)]
    pub gw: GwSection,
    #[serde(default)]
    pub autocorr: AutocorrSection,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl PipelineConfig {
    /// Parses a config and resolves relative paths against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.run.output_dir = resolve(base_dir, &cfg.run.output_dir);
        cfg.input.units = cfg.input.units.as_deref().map(|p| resolve(base_dir, p));
        cfg.input.elements = cfg.input.elements.as_deref().map(|p| resolve(base_dir, p));
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn out(&self, file: &str) -> PathBuf {
        self.run.output_dir.join(file)
    }

    pub fn units_path(&self) -> PathBuf {
        self.input.units.clone().unwrap_or_else(|| self.out(SYNTH_UNITS))
    }

    pub fn schema(&self) -> UnitSchema {
        UnitSchema {
            id_column: self.input.id_column.clone(),
            x_column: self.input.x_column.clone(),
            y_column: self.input.y_column.clone(),
            label_column: self.input.label_column.clone(),
            feature_columns: self.input.feature_columns.clone(),
        }
    }

    /// Checks everything `cmd` needs before it starts any work.
    pub fn validate_for(&self, cmd: Command) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if cmd == Command::Synth {
            let Some(synth) = &self.synth else {
                return cfg_err("the synth command needs a [synth] section".into());
            };
            synth.to_spec(0).validate()?;
            return Ok(());
        }
        if cmd != Command::Report {
            let units = self.units_path();
            if !units.is_file() {
                if self.input.units.is_none() && self.synth.is_some() {
                    return Err(Error::MissingStage {
                        stage: Command::Synth.name().into(),
                        path: units,
                    });
                }
                return cfg_err(format!("unit table {} does not exist", units.display()));
            }
            if let Some(e) = &self.input.elements {
                if !e.is_file() {
                    return cfg_err(format!("element table {} does not exist", e.display()));
                }
            }
        }
        match cmd {
            Command::SelectVars => {
                if !(self.select.threshold > 0.0 && self.select.threshold <= 1.0) {
                    return cfg_err(format!("select.threshold must lie in (0, 1], got {}", self.select.threshold));
                }
                if !self.input.standardize {
                    return cfg_err("variable selection needs input.standardize = true".into());
                }
            }
            Command::FitGlobal | Command::FitGw => {
                if self.folds.n_folds < 2 {
                    return cfg_err(format!("folds.n_folds must be at least 2, got {}", self.folds.n_folds));
                }
                self.global.forest.check("global.forest")?;
                if cmd == Command::FitGw {
                    self.validate_gw()?;
                }
            }
            Command::Autocorr => {
                if self.autocorr.n_permutations == 0 {
                    return cfg_err("autocorr.n_permutations must be positive".into());
                }
                if !(self.autocorr.significance > 0.0 && self.autocorr.significance < 1.0) {
                    return cfg_err("autocorr.significance must lie in (0, 1)".into());
                }
                if let Some(d) = self.autocorr.d_max {
                    if !(d > 0.0 && d.is_finite()) {
                        return cfg_err(format!("autocorr.d_max must be positive, got {d}"));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn validate_gw(&self) -> Result<()> {
        let gw = &self.gw;
        if gw.learners.is_empty() {
            return Err(Error::Config("gw.learners is empty".into()));
        }
        if gw.candidates.is_empty() {
            if gw.bandwidth_mode == BandwidthMode::Fixed {
                return Err(Error::Config("fixed bandwidths need explicit gw.candidates".into()));
            }
            if gw.n_candidates < 2 {
                return Err(Error::Config("gw.n_candidates must be at least 2".into()));
            }
        } else if gw.candidates.len() < 2 {
            return Err(Error::Config("gw.candidates needs at least two values".into()));
        }
        for b in self.explicit_candidates()? {
            KernelSpec { shape: gw.kernel, bandwidth: b }.validate()?;
        }
        gw.forest.check("gw.forest")?;
        GwFitSpec {
            min_positive: gw.min_positive,
            l2_lambda: gw.l2_lambda,
            threshold: gw.threshold,
            ..GwFitSpec::new(Learner::Logistic, KernelSpec::default(), 0)
        }
        .validate(1)
    }

    fn explicit_candidates(&self) -> Result<Vec<Bandwidth>> {
        self.gw
            .candidates
            .iter()
            .map(|&v| match self.gw.bandwidth_mode {
                BandwidthMode::Adaptive => {
                    if v.fract() != 0.0 || v < 2.0 {
                        Err(Error::Config(format!("adaptive candidate {v} is not an integer ≥ 2")))
                    } else {
                        Ok(Bandwidth::AdaptiveK(v as usize))
                    }
                }
                BandwidthMode::Fixed => Ok(Bandwidth::FixedDistance(v)),
            })
            .collect()
    }

    fn seed(&self, stream: u64) -> u64 {
        derive_seed(self.run.seed, stream)
    }
}

fn require(stage: Command, path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingStage {
            stage: stage.name().into(),
            path,
        })
    }
}

fn read_json<T: DeserializeOwned>(stage: Command, path: PathBuf) -> Result<T> {
    let path = require(stage, path)?;
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_file(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

/// Loads the unit table, attaches element labels, optionally restricts to
/// the selected variables, and standardises.
fn load_dataset(cfg: &PipelineConfig, restrict: bool) -> Result<SpatialDataset> {
    let mut ds = load_units_csv(&cfg.units_path(), &cfg.schema())?;
    if let Some(path) = &cfg.input.elements {
        let elements = load_elements_csv(path)?;
        ds = aggregate_majority(&elements, &ds)?.dataset;
    }
    if restrict && cfg.select.restrict_to_selection {
        let trace: SelectionTrace = read_json(Command::SelectVars, cfg.out(SELECTION_TRACE))?;
        ds = ds.select_variables(&trace.retained_variables)?;
    }
    if cfg.input.standardize {
        ds = standardize_features(&ds)?;
    }
    Ok(ds)
}

fn load_labelled(cfg: &PipelineConfig) -> Result<SpatialDataset> {
    let ds = load_dataset(cfg, true)?;
    ds.labels()?;
    if ds.n_classes() < 2 {
        return Err(Error::DegenerateLabels(format!("{} class(es) present, need at least 2", ds.n_classes())));
    }
    Ok(ds)
}

fn folds(cfg: &PipelineConfig, ds: &SpatialDataset) -> Result<FoldAssignment> {
    spatial_kfold(ds, cfg.folds.n_folds, cfg.folds.method, cfg.seed(STREAM_FOLDS))
}

/// Runs one stage. `workers == 0` lets the pool use every core.
pub fn run_command(cmd: Command, cfg: &PipelineConfig, workers: usize) -> Result<()> {
    cfg.validate_for(cmd)?;
    std::fs::create_dir_all(&cfg.run.output_dir).map_err(|e| Error::io(&cfg.run.output_dir, e))?;
    with_workers(workers, || match cmd {
        Command::Synth => cmd_synth(cfg),
        Command::SelectVars => cmd_select_vars(cfg).map(|_| ()),
        Command::FitGlobal => cmd_fit_global(cfg).map(|_| ()),
        Command::Autocorr => cmd_autocorr(cfg).map(|_| ()),
        Command::FitGw => cmd_fit_gw(cfg).map(|_| ()),
        Command::Report => cmd_report(cfg).map(|_| ()),
    })
}

pub fn cmd_synth(cfg: &PipelineConfig) -> Result<()> {
    let section = cfg
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("the synth command needs a [synth] section".into()))?;
    let (ds, truth) = generate(&section.to_spec(cfg.seed(STREAM_SYNTH)))?;
    save_units_csv(&ds, &cfg.out(SYNTH_UNITS))?;
    truth.save_csv(&ds, &cfg.out(SYNTH_TRUTH))
}

pub fn cmd_select_vars(cfg: &PipelineConfig) -> Result<SelectionTrace> {
    let ds = load_dataset(cfg, false)?;
    let trace = select_variables_with(&ds, &cfg.select.exclusions, cfg.select.threshold)?;
    write_json(&cfg.out(SELECTION_TRACE), &trace)?;
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalScores {
    pub n_folds: usize,
    pub fold_method: FoldMethod,
    pub variables: Vec<String>,
    pub class_names: Vec<String>,
    pub reports: Vec<ScoreReport>,
}

fn error_surface_file(kind: GlobalModelKind) -> String {
    let tag = match kind {
        GlobalModelKind::MultinomialLr => "logistic",
        GlobalModelKind::Forest => "forest",
    };
    format!("error_surface_{tag}.csv")
}

pub fn cmd_fit_global(cfg: &PipelineConfig) -> Result<GlobalScores> {
    let ds = load_labelled(cfg)?;
    let folds = folds(cfg, &ds)?;
    let settings = GlobalSettings {
        l2_lambda: cfg.global.l2_lambda,
        forest: cfg.global.forest.params(cfg.seed(STREAM_GLOBAL_FOREST)),
    };
    let labels = ds.labels()?;
    let mut reports = Vec::new();
    for kind in [GlobalModelKind::MultinomialLr, GlobalModelKind::Forest] {
        let eval = evaluate_global(&ds, kind, &folds, &settings)?;
        let errors = error_surface(&eval.predictions, &ds)?;
        let mut wtr = csv::Writer::from_writer(create_file(&cfg.out(&error_surface_file(kind)))?);
        wtr.write_record(["unit_id", "observed", "predicted", "error"])?;
        for (i, u) in ds.units().iter().enumerate() {
            wtr.write_record([
                u.unit_id.as_str(),
                &ds.class_names()[labels[i]],
                &ds.class_names()[eval.predictions[i]],
                if errors[i] > 0.0 { "1" } else { "0" },
            ])?;
        }
        wtr.flush().map_err(|e| Error::io(cfg.out(&error_surface_file(kind)), e))?;
        reports.push(eval.report);
    }
    let scores = GlobalScores {
        n_folds: folds.n_folds,
        fold_method: folds.method,
        variables: ds.variable_names().to_vec(),
        class_names: ds.class_names().to_vec(),
        reports,
    };
    write_json(&cfg.out(GLOBAL_SCORES), &scores)?;
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutocorrSummary {
    pub learner: GlobalModelKind,
    pub d_max: f64,
    pub n_units: usize,
    pub n_errors: usize,
    pub isolated_units: usize,
    pub global: GResult,
    pub n_hotspots: usize,
    pub local_effective_level: f64,
}

/// Reads the `error` column of a stage-written error surface, checking the
/// unit order against the dataset.
fn read_error_surface(path: &Path, ds: &SpatialDataset) -> Result<Vec<f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut values = Vec::with_capacity(ds.n_units());
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or("");
        match ds.units().get(i) {
            Some(u) if u.unit_id == id => {}
            _ => {
                return Err(Error::Integrity(format!(
                    "{} row {} ('{id}') does not match the unit table",
                    path.display(),
                    i + 1
                )))
            }
        }
        values.push(match rec.get(3) {
            Some("1") => 1.0,
            Some("0") => 0.0,
            other => {
                return Err(Error::Parse {
                    row: i + 1,
                    column: "error".into(),
                    message: format!("expected 0 or 1, got {other:?}"),
                })
            }
        });
    }
    if values.len() != ds.n_units() {
        return Err(Error::DimensionMismatch {
            expected: ds.n_units(),
            found: values.len(),
        });
    }
    Ok(values)
}

pub fn cmd_autocorr(cfg: &PipelineConfig) -> Result<AutocorrSummary> {
    let path = require(Command::FitGlobal, cfg.out(&error_surface_file(cfg.autocorr.learner)))?;
    let ds = load_dataset(cfg, false)?;
    let values = read_error_surface(&path, &ds)?;
    let d_max = match cfg.autocorr.d_max {
        Some(d) => d,
        None => max_nearest_neighbor_distance(&ds)?,
    };
    let graph = build_distance_band(&ds, d_max)?;
    let a = &cfg.autocorr;
    let global = global_g(&values, &graph, a.n_permutations, cfg.seed(STREAM_AUTOCORR_GLOBAL))?;
    let local = local_g_star(
        &values,
        &graph,
        a.n_permutations,
        cfg.seed(STREAM_AUTOCORR_LOCAL),
        a.significance,
        a.bonferroni,
    )?;
    local.write_csv(create_file(&cfg.out(AUTOCORR_LOCAL))?)?;
    let summary = AutocorrSummary {
        learner: a.learner,
        d_max,
        n_units: ds.n_units(),
        n_errors: values.iter().filter(|&&v| v > 0.0).count(),
        isolated_units: graph.isolated.len(),
        global,
        n_hotspots: local.n_hotspots(),
        local_effective_level: local.effective_level,
    };
    write_json(&cfg.out(AUTOCORR_GLOBAL), &summary)?;
    Ok(summary)
}

fn learner_tag(l: Learner) -> &'static str {
    match l {
        Learner::Logistic => "logistic",
        Learner::Forest => "forest",
    }
}

/// Coefficient summaries of one class, ordered by descending mean |β|.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCoefficients {
    pub class_index: usize,
    pub class_name: String,
    pub n_fitted: usize,
    pub n_skipped: usize,
    pub summaries: Vec<VariableSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GwDispersion {
    pub dispersion: Vec<DispersionRow>,
    pub coefficients: Vec<ClassCoefficients>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GwScores {
    pub bandwidth_selection: Vec<LearnerSelection>,
    pub reports: Vec<GwScoreReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSelection {
    pub learner: Learner,
    pub classes: Vec<BandwidthSelection>,
}

pub fn cmd_fit_gw(cfg: &PipelineConfig) -> Result<GwScores> {
    let ds = load_labelled(cfg)?;
    let folds = folds(cfg, &ds)?;
    let gw = &cfg.gw;
    let candidates = if gw.candidates.is_empty() {
        let min_train = (0..folds.n_folds).map(|f| folds.train_indices(f).len()).min().unwrap_or(0);
        default_candidates(min_train, ds.n_variables(), gw.n_candidates)
    } else {
        cfg.explicit_candidates()?
    };
    let mut selections = Vec::new();
    let mut reports = Vec::new();
    let mut surfaces = Vec::new();
    for &learner in &gw.learners {
        let mut specs = Vec::with_capacity(ds.n_classes());
        let mut classes = Vec::with_capacity(ds.n_classes());
        for c in 0..ds.n_classes() {
            let base = GwFitSpec {
                min_positive: gw.min_positive,
                fallback: gw.fallback,
                l2_lambda: gw.l2_lambda,
                threshold: gw.threshold,
                forest: gw.forest.params(cfg.seed(STREAM_GW_FOREST)),
                ..GwFitSpec::new(learner, KernelSpec { shape: gw.kernel, bandwidth: candidates[0] }, c)
            };
            let sel = select_bandwidth(&ds, &base, &candidates, &folds)?;
            let spec = base.with_bandwidth(sel.best);
            let models = fit_gw_auto(&ds, &spec)?;
            let stem = format!("gw_{}_class{c}", learner_tag(learner));
            write_json(&cfg.out(&format!("{stem}_bandwidth.json")), &sel)?;
            models.write_csv(create_file(&cfg.out(&format!("{stem}_models.csv")))?)?;
            if learner == Learner::Logistic {
                let surface = extract_coefficients(&models, ds.variable_names())?;
                surface.write_csv(create_file(&cfg.out(&format!("{stem}_coefficients.csv")))?)?;
                surfaces.push(surface);
            }
            specs.push(spec);
            classes.push(sel);
        }
        reports.push(evaluate_gw(&ds, &specs, &folds)?);
        selections.push(LearnerSelection { learner, classes });
    }
    let scores = GwScores {
        bandwidth_selection: selections,
        reports,
    };
    write_json(&cfg.out(GW_SCORES), &scores)?;
    let coefficients = surfaces
        .iter()
        .map(|s| {
            let mut summaries = s.summaries.clone();
            summaries.sort_by_key(|v| s.order_by_mean_abs.iter().position(|n| *n == v.variable));
            ClassCoefficients {
                class_index: s.class_index,
                class_name: s.class_name.clone(),
                n_fitted: s.n_fitted,
                n_skipped: s.n_skipped,
                summaries,
            }
        })
        .collect();
    write_json(
        &cfg.out(GW_DISPERSION),
        &GwDispersion {
            dispersion: coefficient_dispersion_by_class(&surfaces),
            coefficients,
        },
    )?;
    Ok(scores)
}

/// GW learner score next to the global score of the same model family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    pub learner: Learner,
    #[serde(deserialize_with = "crate::data::f64_or_nan")]
    pub global_macro_f1: f64,
    pub gw_mean_class_f1: f64,
    pub gw_ovr_macro_f1: Option<f64>,
    pub skipped_units_per_class: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub selection: SelectionTrace,
    pub global: GlobalScores,
    pub autocorrelation: AutocorrSummary,
    pub gw: GwScores,
    pub comparison: Vec<ModelComparison>,
    pub dispersion: GwDispersion,
}

pub fn cmd_report(cfg: &PipelineConfig) -> Result<Report> {
    let selection: SelectionTrace = read_json(Command::SelectVars, cfg.out(SELECTION_TRACE))?;
    selection.validate()?;
    let global: GlobalScores = read_json(Command::FitGlobal, cfg.out(GLOBAL_SCORES))?;
    let autocorrelation: AutocorrSummary = read_json(Command::Autocorr, cfg.out(AUTOCORR_GLOBAL))?;
    let gw: GwScores = read_json(Command::FitGw, cfg.out(GW_SCORES))?;
    let dispersion: GwDispersion = read_json(Command::FitGw, cfg.out(GW_DISPERSION))?;
    let comparison = gw
        .reports
        .iter()
        .map(|r| {
            let family = match r.learner {
                Learner::Logistic => GlobalModelKind::MultinomialLr.name(),
                Learner::Forest => GlobalModelKind::Forest.name(),
            };
            let global_macro_f1 = global
                .reports
                .iter()
                .find(|g| g.model == family)
                .map_or(f64::NAN, |g| g.macro_f1);
            ModelComparison {
                learner: r.learner,
                global_macro_f1,
                gw_mean_class_f1: r.mean_class_f1,
                gw_ovr_macro_f1: r.ovr_macro_f1,
                skipped_units_per_class: r.per_class.iter().map(|c| c.n_skipped).collect(),
            }
        })
        .collect();
    let report = Report {
        seed: cfg.run.seed,
        selection,
        global,
        autocorrelation,
        gw,
        comparison,
        dispersion,
    };
    write_json(&cfg.out(REPORT), &report)?;
    Ok(report)
}

/// Human-readable one-liner per stage for the CLI.
pub fn describe_outputs(cmd: Command, cfg: &PipelineConfig) -> String {
    let files: Vec<String> = match cmd {
        Command::Synth => vec![SYNTH_UNITS.into(), SYNTH_TRUTH.into()],
        Command::SelectVars => vec![SELECTION_TRACE.into()],
        Command::FitGlobal => vec![
            GLOBAL_SCORES.into(),
            error_surface_file(GlobalModelKind::MultinomialLr),
            error_surface_file(GlobalModelKind::Forest),
        ],
        Command::Autocorr => vec![AUTOCORR_GLOBAL.into(), AUTOCORR_LOCAL.into()],
        Command::FitGw => vec![GW_SCORES.into(), GW_DISPERSION.into(), "gw_<learner>_class<c>_*".into()],
        Command::Report => vec![REPORT.into()],
    };
    format!("{}: wrote {} in {}", cmd.name(), files.join(", "), cfg.run.output_dir.display())
}
