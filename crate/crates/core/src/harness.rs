//! End-to-end orchestration: audit, feature extraction, split planning, LR
//! training per sample, evaluation, statistics, plots.
//!
//! Output layout under the configured output directory:
//!
//! ```text
//! audit.txt, corrections.csv        audit findings and suggested fixes
//! features.csv                      features of original lesions
//! features_augmented.csv            features of augmented copies
//! split_plan.json                   test sets and training samples
//! models/LR/<testset>_<ratio>_<rep>.json
//! predictions/<model>/<testset>_<ratio>_<rep>.csv
//! metrics.csv, summary.txt          per-run metrics and mean ± std table
//! stats.txt, stats.json             slope and Mann-Whitney tests
//! plots/<model>_<sex>_auroc.svg
//! report.txt
//! ledger.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ini::Ini;
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    audit, correction_manifest, format_audit_table, ingest, read_metadata, summarize, CorrectionManifest, Diagnosis,
    DiagnosisGrouping, IngestOptions, LesionRecord, MaskNaming, MissingSexPolicy, Sex,
};
use crate::error::{Error, Result};
use crate::features::{
    extract_all, read_feature_table, write_feature_table, FeatureConfig, FeatureRow, FEATURE_NAMES, REFERENCE_SELECTION,
};
use crate::imaging::{AugmentParams, MaskedImage};
use crate::logreg::{fit_with_grid_search, FitOptions, LrModel, TrainReport};
use crate::metrics::{
    aggregate, evaluate, find_prediction_files, format_summary_table, read_metrics_csv, render_metrics_csv,
    write_atomic, MetricResult, ModelId, PredictionRow, PredictionSet, RunKey,
};
use crate::selection::{select_features, FeatureMatrix, SelectionParams, SelectionResult, Standardizer};
use crate::splits::{build_plan, verify_no_leakage, SplitParams, SplitPlan, TestSet, TrainvalSample};
use crate::stats::{build_report, SlopeMode, StatReport, StatsParams};

/// Every config key, by section. Printed by the CLI's `--help`.
pub const CONFIG_HELP: &str = "\
Config file: INI sections with key = value lines.

[paths]
  metadata       metadata CSV (img_id, lesion_id, patient_id, gender, diagnostic)
  images         image directory
  masks          mask directory
  output         output directory (default: out)
  corrections    optional correction manifest (kind,old_id,new_id)
  predictions    extra prediction directories, comma separated
[run]
  seed           master seed (default 0)
  ratios         female ratios, comma separated (default 0,0.25,0.5,0.75,1)
  reps           samples per (test set, ratio) (default 5)
  testsets       number of held-out test sets (default 5)
  per_category   patients per category in each test set (default 26)
  workers        worker threads (default: all cores)
[lr]
  c_grid         inverse regularisation grid (default 0.01,0.05,0.1,0.5,1,2,5)
  folds          cross-validation folds (default 5)
  tolerance      gradient-norm tolerance (default 1e-6)
  max_iter       optimizer iteration cap (default 1000)
[features]
  kmeans_k, kmeans_max_iter, slic_segments, slic_compactness,
  slic_iterations, asymmetry_rotations, asymmetry_step, fold_axis
  (vertical|horizontal|both), blue_veil_require_blue, seed
[selection]
  threshold, max_partners, top_n,
  freeze_reference_features  use the fixed reference feature list (default false)
[stats]
  alpha, slope_family, mwu_family,
  pooled_slope_test  pool every run (true) or use per-test-set means (false)
[dataset]
  missing_sex    patient|lesion (default patient)
  cancer_codes   diagnoses counted as cancer (default BCC,SCC,MEL)
  mask_patterns  mask file patterns using {id} and {stem}

Environment overrides (paths only): SKINBIAS_METADATA, SKINBIAS_IMAGES,
SKINBIAS_MASKS, SKINBIAS_OUTPUT, SKINBIAS_CORRECTIONS.
";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub metadata: PathBuf,
    pub images: PathBuf,
    pub masks: PathBuf,
    pub output: PathBuf,
    pub corrections: Option<PathBuf>,
    pub extra_predictions: Vec<PathBuf>,
    pub master_seed: u64,
    pub split: SplitParams,
    pub workers: Option<usize>,
    pub c_grid: Vec<f64>,
    pub folds: usize,
    pub fit: FitOptions<f64>,
    pub features: FeatureConfig,
    pub selection: SelectionParams,
    pub freeze_reference_features: bool,
    pub stats: StatsParams,
    pub missing_sex: MissingSexPolicy,
    pub cancer_codes: Vec<Diagnosis>,
    pub mask_naming: MaskNaming,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            metadata: PathBuf::from("metadata.csv"),
            images: PathBuf::from("images"),
            masks: PathBuf::from("masks"),
            output: PathBuf::from("out"),
            corrections: None,
            extra_predictions: Vec::new(),
            master_seed: 0,
            split: SplitParams::default(),
            workers: None,
            c_grid: vec![0.01, 0.05, 0.1, 0.5, 1.0, 2.0, 5.0],
            folds: 5,
            fit: FitOptions::default(),
            features: FeatureConfig::default(),
            selection: SelectionParams::default(),
            freeze_reference_features: false,
            stats: StatsParams::default(),
            missing_sex: MissingSexPolicy::Patient,
            cancer_codes: vec![Diagnosis::BCC, Diagnosis::SCC, Diagnosis::MEL],
            mask_naming: MaskNaming::default(),
        }
    }
}

fn parse_value<V: std::str::FromStr>(section: &str, key: &str, raw: &str) -> Result<V> {
    raw.trim()
        .parse()
        .map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse `{raw}`")))
}

fn parse_list<V: std::str::FromStr>(section: &str, key: &str, raw: &str) -> Result<Vec<V>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(section, key, s))
        .collect()
}

fn parse_bool(section: &str, key: &str, raw: &str) -> Result<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("[{section}] {key}: expected a boolean, got `{raw}`"))),
    }
}

impl RunConfig {
    pub fn from_ini_str(text: &str, base_dir: &Path) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut c = Self::default();
        let known: BTreeMap<&str, &[&str]> = BTreeMap::from([
            ("paths", &["metadata", "images", "masks", "output", "corrections", "predictions"][..]),
            ("run", &["seed", "ratios", "reps", "testsets", "per_category", "workers"][..]),
            ("lr", &["c_grid", "folds", "tolerance", "max_iter"][..]),
            (
                "features",
                &[
                    "kmeans_k",
                    "kmeans_max_iter",
                    "slic_segments",
                    "slic_compactness",
                    "slic_iterations",
                    "asymmetry_rotations",
                    "asymmetry_step",
                    "fold_axis",
                    "blue_veil_require_blue",
                    "seed",
                ][..],
            ),
            ("selection", &["threshold", "max_partners", "top_n", "freeze_reference_features"][..]),
            ("stats", &["alpha", "slope_family", "mwu_family", "pooled_slope_test"][..]),
            ("dataset", &["missing_sex", "cancer_codes", "mask_patterns"][..]),
        ]);
        for (section, props) in ini.iter() {
            let Some(name) = section else {
                if props.iter().next().is_some() {
                    return Err(Error::Config("keys outside any section".into()));
                }
                continue;
            };
            let keys = known
                .get(name)
                .ok_or_else(|| Error::Config(format!("unknown section [{name}]")))?;
            for (key, raw) in props.iter() {
                if !keys.contains(&key) {
                    return Err(Error::Config(format!("unknown key [{name}] {key}")));
                }
                c.set(name, key, raw, base_dir)?;
            }
        }
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_ini_str(&text, base)
    }

    fn set(&mut self, section: &str, key: &str, raw: &str, base: &Path) -> Result<()> {
        let path = |raw: &str| {
            let p = PathBuf::from(raw.trim());
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let s = section;
        match (section, key) {
            ("paths", "metadata") => self.metadata = path(raw),
            ("paths", "images") => self.images = path(raw),
            ("paths", "masks") => self.masks = path(raw),
            ("paths", "output") => self.output = path(raw),
            ("paths", "corrections") => self.corrections = Some(path(raw)),
            ("paths", "predictions") => {
                self.extra_predictions = raw.split(',').filter(|p| !p.trim().is_empty()).map(path).collect()
            }
            ("run", "seed") => self.master_seed = parse_value(s, key, raw)?,
            ("run", "ratios") => self.split.ratios = parse_list(s, key, raw)?,
            ("run", "reps") => self.split.reps = parse_value(s, key, raw)?,
            ("run", "testsets") => self.split.n_testsets = parse_value(s, key, raw)?,
            ("run", "per_category") => self.split.per_category = parse_value(s, key, raw)?,
            ("run", "workers") => self.workers = Some(parse_value(s, key, raw)?),
            ("lr", "c_grid") => self.c_grid = parse_list(s, key, raw)?,
            ("lr", "folds") => self.folds = parse_value(s, key, raw)?,
            ("lr", "tolerance") => self.fit.tolerance = parse_value(s, key, raw)?,
            ("lr", "max_iter") => self.fit.max_iter = parse_value(s, key, raw)?,
            ("features", "kmeans_k") => self.features.kmeans_k = parse_value(s, key, raw)?,
            ("features", "kmeans_max_iter") => self.features.kmeans_max_iter = parse_value(s, key, raw)?,
            ("features", "slic_segments") => self.features.slic.n_segments = parse_value(s, key, raw)?,
            ("features", "slic_compactness") => self.features.slic.compactness = parse_value(s, key, raw)?,
            ("features", "slic_iterations") => self.features.slic.iterations = parse_value(s, key, raw)?,
            ("features", "asymmetry_rotations") => self.features.asymmetry_rotations = parse_value(s, key, raw)?,
            ("features", "asymmetry_step") => self.features.asymmetry_step_degrees = parse_value(s, key, raw)?,
            ("features", "fold_axis") => self.features.fold_axis = raw.parse()?,
            ("features", "blue_veil_require_blue") => self.features.blue_veil_require_blue = parse_bool(s, key, raw)?,
            ("features", "seed") => self.features.seed = parse_value(s, key, raw)?,
            ("selection", "threshold") => self.selection.threshold = parse_value(s, key, raw)?,
            ("selection", "max_partners") => self.selection.max_partners = parse_value(s, key, raw)?,
            ("selection", "top_n") => self.selection.top_n = parse_value(s, key, raw)?,
            ("selection", "freeze_reference_features") => self.freeze_reference_features = parse_bool(s, key, raw)?,
            ("stats", "alpha") => self.stats.alpha = parse_value(s, key, raw)?,
            ("stats", "slope_family") => self.stats.slope_family = parse_value(s, key, raw)?,
            ("stats", "mwu_family") => self.stats.mwu_family = parse_value(s, key, raw)?,
            ("stats", "pooled_slope_test") => {
                self.stats.mode = if parse_bool(s, key, raw)? {
                    SlopeMode::Pooled
                } else {
                    SlopeMode::TestsetMean
                }
            }
            ("dataset", "missing_sex") => {
                self.missing_sex = match raw.trim().to_ascii_lowercase().as_str() {
                    "patient" => MissingSexPolicy::Patient,
                    "lesion" => MissingSexPolicy::Lesion,
                    other => return Err(Error::Config(format!("[dataset] missing_sex: unknown policy `{other}`"))),
                }
            }
            ("dataset", "cancer_codes") => self.cancer_codes = parse_list(s, key, raw)?,
            ("dataset", "mask_patterns") => {
                self.mask_naming = MaskNaming(raw.split(',').map(|p| p.trim().to_string()).collect())
            }
            _ => return Err(Error::Config(format!("unknown key [{section}] {key}"))),
        }
        Ok(())
    }

    /// Applies `SKINBIAS_*` path overrides from `env`.
    pub fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) {
        let get = |k: &str| env(k).filter(|v| !v.is_empty()).map(PathBuf::from);
        if let Some(p) = get("SKINBIAS_METADATA") {
            self.metadata = p;
        }
        if let Some(p) = get("SKINBIAS_IMAGES") {
            self.images = p;
        }
        if let Some(p) = get("SKINBIAS_MASKS") {
            self.masks = p;
        }
        if let Some(p) = get("SKINBIAS_OUTPUT") {
            self.output = p;
        }
        if let Some(p) = get("SKINBIAS_CORRECTIONS") {
            self.corrections = Some(p);
        }
    }

    /// Checks values and that the input paths exist.
    pub fn validate(&self) -> Result<()> {
        for p in [&self.metadata, &self.images, &self.masks] {
            if !p.exists() {
                return Err(Error::MissingFile(p.clone()));
            }
        }
        if let Some(p) = &self.corrections {
            if !p.exists() {
                return Err(Error::MissingFile(p.clone()));
            }
        }
        self.validate_values()
    }

    fn validate_values(&self) -> Result<()> {
        if self.split.ratios.is_empty() || self.split.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config("ratios must be non-empty and within [0, 1]".into()));
        }
        if self.split.reps == 0 || self.split.n_testsets == 0 || self.split.per_category == 0 {
            return Err(Error::Config("reps, testsets and per_category must be positive".into()));
        }
        if self.c_grid.is_empty() || self.c_grid.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::Config("c_grid must hold positive values".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        Ok(())
    }

    fn ingest_options(&self) -> Result<IngestOptions> {
        let corrections = match &self.corrections {
            Some(p) => Some(CorrectionManifest::load(p)?),
            None => None,
        };
        Ok(IngestOptions {
            grouping: DiagnosisGrouping::from_cancer_codes(&self.cancer_codes),
            missing_sex: self.missing_sex,
            corrections,
            mask_naming: self.mask_naming.clone(),
        })
    }

    pub fn out(&self, relative: &str) -> PathBuf {
        self.output.join(relative)
    }

    pub fn predictions_dir(&self, model: ModelId) -> PathBuf {
        self.output.join("predictions").join(model.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Done,
    /// Outputs already existed.
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub key: RunKey,
    pub seed: u64,
    pub status: JobStatus,
    pub seconds: f64,
    pub artifacts: Vec<String>,
    pub best_c: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub seconds: f64,
    pub ok: bool,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunLedger {
    pub master_seed: u64,
    pub workers: usize,
    pub stages: Vec<StageRecord>,
    pub jobs: Vec<JobRecord>,
    /// Lesions dropped because feature extraction failed.
    pub feature_failures: Vec<String>,
    /// Every file written, relative to the output directory.
    pub artifacts: Vec<String>,
}

impl RunLedger {
    pub fn failed_jobs(&self) -> usize {
        self.jobs.iter().filter(|j| j.status == JobStatus::Failed).count()
    }

    pub fn ok(&self) -> bool {
        self.failed_jobs() == 0 && self.stages.iter().all(|s| s.ok)
    }

    fn add_artifact(&mut self, config: &RunConfig, path: &Path) {
        let rel = path
            .strip_prefix(&config.output)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        if !self.artifacts.contains(&rel) {
            self.artifacts.push(rel);
        }
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        info!("stage {name}");
        let out = f(self);
        self.stages.push(StageRecord {
            name: name.to_string(),
            seconds: start.elapsed().as_secs_f64(),
            ok: out.is_ok(),
            note: out.as_ref().err().map(ToString::to_string),
        });
        out
    }

    pub fn save(&mut self, config: &RunConfig) -> Result<()> {
        let path = config.out("ledger.json");
        self.add_artifact(config, &path);
        self.artifacts.sort();
        write_atomic(&path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

fn write_text(config: &RunConfig, ledger: &mut RunLedger, relative: &str, text: &str) -> Result<PathBuf> {
    let path = config.out(relative);
    write_atomic(&path, text.as_bytes())?;
    ledger.add_artifact(config, &path);
    Ok(path)
}

fn write_features_atomic(path: &Path, rows: &[FeatureRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("csv.tmp");
    write_feature_table(&tmp, rows)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Runs `f` on a pool of `workers` threads, or the global pool.
pub fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Audit findings plus a suggested correction manifest.
pub fn run_audit(config: &RunConfig, ledger: &mut RunLedger) -> Result<Vec<crate::dataset::AuditFinding>> {
    ledger.stage("audit", |ledger| {
        let findings = audit(&config.metadata, &config.images)?;
        let rows = read_metadata(&config.metadata)?;
        write_text(config, ledger, "audit.txt", &format_audit_table(&findings))?;
        write_text(config, ledger, "corrections.csv", &correction_manifest(&findings, &rows).render())?;
        Ok(findings)
    })
}

pub fn load_records(config: &RunConfig) -> Result<Vec<LesionRecord>> {
    ingest(&config.metadata, &config.images, &config.masks, &config.ingest_options()?)
}

fn load_image(config: &RunConfig, image_id: &str) -> Result<MaskedImage> {
    let mask = config
        .mask_naming
        .resolve(&config.masks, image_id)
        .ok_or_else(|| Error::MissingFile(config.masks.join(image_id)))?;
    MaskedImage::load(&config.images.join(image_id), &mask)
}

fn cached_rows(path: &Path, ids: &[&str]) -> Option<Vec<FeatureRow>> {
    if !path.exists() {
        return None;
    }
    match read_feature_table(path) {
        Ok(rows) if rows.iter().map(|r| r.record.image_id.as_str()).eq(ids.iter().copied()) => Some(rows),
        Ok(_) => {
            warn!("{} does not match the current lesions; recomputing", path.display());
            None
        }
        Err(e) => {
            warn!("{} unreadable ({e}); recomputing", path.display());
            None
        }
    }
}

/// Features for every record, in record order. Lesions whose extraction
/// fails are reported in the ledger and left out.
pub fn run_extract(config: &RunConfig, records: &[LesionRecord], ledger: &mut RunLedger) -> Result<Vec<FeatureRow>> {
    ledger.stage("extract", |ledger| {
        let path = config.out("features.csv");
        let ids: Vec<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
        if let Some(rows) = cached_rows(&path, &ids) {
            ledger.add_artifact(config, &path);
            return Ok(rows);
        }
        let results: Vec<Result<FeatureRow>> = records
            .par_iter()
            .map(|r| {
                let image = load_image(config, &r.image_id)?;
                let features = extract_all(&r.image_id, &image, &config.features)?;
                Ok(FeatureRow {
                    record: r.clone(),
                    features,
                })
            })
            .collect();
        let mut rows = Vec::with_capacity(results.len());
        for (r, res) in records.iter().zip(results) {
            match res {
                Ok(row) => rows.push(row),
                Err(e) => {
                    warn!("dropping {}: {e}", r.image_id);
                    ledger.feature_failures.push(format!("{}: {e}", r.image_id));
                }
            }
        }
        if ledger.feature_failures.is_empty() {
            write_features_atomic(&path, &rows)?;
            ledger.add_artifact(config, &path);
        }
        Ok(rows)
    })
}

/// Builds, checks and writes the split plan.
pub fn run_split(config: &RunConfig, records: &[LesionRecord], ledger: &mut RunLedger) -> Result<SplitPlan> {
    ledger.stage("split", |ledger| {
        let plan = build_plan(records, config.master_seed, &config.split)?;
        let violations = verify_no_leakage(&plan, records);
        if !violations.is_empty() {
            return Err(Error::Invalid(format!(
                "split plan leaks: {} violations, first {:?}",
                violations.len(),
                violations[0]
            )));
        }
        let path = config.out("split_plan.json");
        plan.save(&path)?;
        ledger.add_artifact(config, &path);
        Ok(plan)
    })
}

/// Features of every augmented copy in the plan, sorted by id.
pub fn run_augmented_features(
    config: &RunConfig,
    plan: &SplitPlan,
    originals: &BTreeMap<String, FeatureRow>,
    ledger: &mut RunLedger,
) -> Result<Vec<FeatureRow>> {
    ledger.stage("augment", |ledger| {
        let path = config.out("features_augmented.csv");
        let copies = plan.augmented_lesions();
        let ids: Vec<&str> = copies.iter().map(|a| a.image_id.as_str()).collect();
        if let Some(rows) = cached_rows(&path, &ids) {
            ledger.add_artifact(config, &path);
            return Ok(rows);
        }
        let params = AugmentParams::default();
        let rows: Vec<FeatureRow> = copies
            .par_iter()
            .map(|a| {
                let parent = originals
                    .get(&a.parent_image_id)
                    .ok_or_else(|| Error::Invalid(format!("augmented parent {} has no features", a.parent_image_id)))?;
                let image = a.recipe.apply(&load_image(config, &a.parent_image_id)?, &params);
                Ok(FeatureRow {
                    record: a.record(&parent.record),
                    features: extract_all(&a.image_id, &image, &config.features)?,
                })
            })
            .collect::<Result<_>>()?;
        write_features_atomic(&path, &rows)?;
        ledger.add_artifact(config, &path);
        Ok(rows)
    })
}

/// Model artifact written per LR job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub key: RunKey,
    pub selection: SelectionResult<f64>,
    pub standardizer: Standardizer<f64>,
    pub model: LrModel<f64>,
    pub report: TrainReport<f64>,
}

fn feature_rows<'a>(
    ids: impl Iterator<Item = &'a str>,
    features: &'a BTreeMap<String, FeatureRow>,
) -> Result<Vec<&'a FeatureRow>> {
    ids.map(|id| {
        features
            .get(id)
            .ok_or_else(|| Error::Invalid(format!("no features for lesion {id}")))
    })
    .collect()
}

fn matrix_of(rows: &[&FeatureRow]) -> Result<FeatureMatrix<f64>> {
    let names: Vec<String> = FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    let values: Vec<Vec<f64>> = rows.iter().map(|r| r.features.values().to_vec()).collect();
    FeatureMatrix::from_rows(names, &values)
}

/// Trains one LR model on `sample` and predicts its test set.
pub fn train_job(
    config: &RunConfig,
    sample: &TrainvalSample,
    test_set: &TestSet,
    features: &BTreeMap<String, FeatureRow>,
) -> Result<(PredictionSet, ModelArtifact)> {
    let key = RunKey {
        model: ModelId::LR,
        testset: sample.testset,
        ratio: sample.ratio,
        rep: sample.rep,
    };
    let train = feature_rows(sample.all_image_ids(), features)?;
    let labels: Vec<u8> = train.iter().map(|r| r.record.label.as_binary()).collect();
    let groups: Vec<String> = train.iter().map(|r| r.record.patient_id.clone()).collect();
    let matrix = matrix_of(&train)?;
    let selection = if config.freeze_reference_features {
        SelectionResult {
            dropped_constant: Vec::new(),
            dropped_redundant: Vec::new(),
            selected: REFERENCE_SELECTION.iter().map(|s| s.to_string()).collect(),
            correlation_with_label: BTreeMap::new(),
        }
    } else {
        select_features(&matrix, &labels, &config.selection)?
    };
    let chosen = matrix.select(&selection.selected)?;
    let standardizer = Standardizer::fit(&chosen);
    let x = standardizer.apply(&chosen)?.rows();
    let (model, report) = fit_with_grid_search(
        &x,
        &labels,
        &groups,
        &standardizer.names,
        &config.c_grid,
        config.folds,
        &config.fit,
        sample.seed,
    )?;

    let test = feature_rows(test_set.image_ids.iter().map(String::as_str), features)?;
    let test_x = standardizer.apply(&matrix_of(&test)?)?.rows();
    let probs = model.predict_proba(&test_x, &standardizer.names)?;
    let rows = test
        .iter()
        .zip(probs)
        .map(|(r, p)| PredictionRow {
            image_id: r.record.image_id.clone(),
            patient_id: r.record.patient_id.clone(),
            sex: r.record.sex,
            true_label: r.record.label.as_binary(),
            prob_cancer: p,
        })
        .collect();
    Ok((
        PredictionSet { key, rows },
        ModelArtifact {
            key,
            selection,
            standardizer,
            model,
            report,
        },
    ))
}

fn model_path(config: &RunConfig, key: &RunKey) -> PathBuf {
    config
        .output
        .join("models")
        .join(key.model.as_str())
        .join(key.file_name().replace(".csv", ".json"))
}

/// Runs every LR job not already on disk; failures are recorded, not fatal.
pub fn run_training(
    config: &RunConfig,
    plan: &SplitPlan,
    features: &BTreeMap<String, FeatureRow>,
    ledger: &mut RunLedger,
) -> Result<()> {
    ledger.stage("train-lr", |ledger| {
        let dir = config.predictions_dir(ModelId::LR);
        let records: Vec<JobRecord> = plan
            .samples
            .par_iter()
            .map(|sample| {
                let start = Instant::now();
                let key = RunKey {
                    model: ModelId::LR,
                    testset: sample.testset,
                    ratio: sample.ratio,
                    rep: sample.rep,
                };
                let pred_path = dir.join(key.file_name());
                let mpath = model_path(config, &key);
                let artifacts = [pred_path.clone(), mpath.clone()];
                let mut record = JobRecord {
                    key,
                    seed: sample.seed,
                    status: JobStatus::Done,
                    seconds: 0.0,
                    artifacts: artifacts.iter().map(|p| p.to_string_lossy().into_owned()).collect(),
                    best_c: None,
                    error: None,
                };
                if pred_path.exists() && mpath.exists() {
                    record.status = JobStatus::Skipped;
                    return record;
                }
                let result = plan
                    .test_set(sample.testset)
                    .ok_or_else(|| Error::Invalid(format!("plan has no test set {}", sample.testset)))
                    .and_then(|t| train_job(config, sample, t, features))
                    .and_then(|(preds, artifact)| {
                        write_atomic(&mpath, serde_json::to_string_pretty(&artifact)?.as_bytes())?;
                        preds.save(&pred_path)?;
                        Ok(artifact.model.c)
                    });
                match result {
                    Ok(c) => record.best_c = Some(c),
                    Err(e) => {
                        warn!("job {} failed: {e}", key.file_name());
                        record.status = JobStatus::Failed;
                        record.error = Some(e.to_string());
                    }
                }
                record.seconds = start.elapsed().as_secs_f64();
                record
            })
            .collect();
        for r in &records {
            if r.status != JobStatus::Failed {
                for a in &r.artifacts {
                    ledger.add_artifact(config, Path::new(a));
                }
            }
        }
        ledger.jobs.extend(records);
        Ok(())
    })
}

/// Checks that a prediction file covers exactly the plan's test set.
pub fn check_against_plan(set: &PredictionSet, plan: &SplitPlan) -> Result<()> {
    let t = plan
        .test_set(set.key.testset)
        .ok_or_else(|| Error::Invalid(format!("test set {} not in plan", set.key.testset)))?;
    let want: BTreeSet<&str> = t.image_ids.iter().map(String::as_str).collect();
    let mut got = BTreeSet::new();
    for r in &set.rows {
        if !got.insert(r.image_id.as_str()) {
            return Err(Error::Invalid(format!("{} appears twice", r.image_id)));
        }
    }
    if got != want {
        let missing = want.difference(&got).count();
        let extra = got.difference(&want).count();
        return Err(Error::Invalid(format!(
            "{}: {missing} test lesions missing, {extra} unexpected",
            set.key.file_name()
        )));
    }
    Ok(())
}

/// Loads and validates every prediction file under `dirs`.
pub fn load_predictions(dirs: &[PathBuf], plan: Option<&SplitPlan>) -> Result<Vec<PredictionSet>> {
    let mut sets: BTreeMap<RunKey, (PathBuf, PredictionSet)> = BTreeMap::new();
    for dir in dirs {
        if !dir.exists() {
            continue;
        }
        for path in find_prediction_files(dir)? {
            let set = PredictionSet::load(&path)?;
            if let Some(plan) = plan {
                check_against_plan(&set, plan).map_err(|e| Error::Prediction {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
            }
            if let Some((first, _)) = sets.get(&set.key) {
                return Err(Error::Prediction {
                    path,
                    reason: format!("duplicates run {:?} from {}", set.key, first.display()),
                });
            }
            sets.insert(set.key, (path, set));
        }
    }
    Ok(sets.into_values().map(|(_, s)| s).collect())
}

/// Per-sex metrics for every prediction file; writes metrics and summary.
pub fn run_evaluate(config: &RunConfig, ledger: &mut RunLedger) -> Result<Vec<MetricResult>> {
    ledger.stage("evaluate", |ledger| {
        let mut dirs = vec![config.output.join("predictions")];
        dirs.extend(config.extra_predictions.iter().cloned());
        let plan_path = config.out("split_plan.json");
        let plan = if plan_path.exists() {
            Some(SplitPlan::load(&plan_path)?)
        } else {
            None
        };
        let sets = load_predictions(&dirs, plan.as_ref())?;
        if sets.is_empty() {
            return Err(Error::Invalid("no prediction files found".into()));
        }
        let results: Vec<MetricResult> = sets.par_iter().flat_map_iter(evaluate).collect();
        write_text(config, ledger, "metrics.csv", &render_metrics_csv(&results))?;
        write_text(config, ledger, "summary.txt", &format_summary_table(&aggregate(&results)))?;
        Ok(results)
    })
}

/// Statistical tests over `metrics.csv`.
pub fn run_stats(config: &RunConfig, ledger: &mut RunLedger) -> Result<StatReport> {
    ledger.stage("stats", |ledger| {
        let results = read_metrics_csv(&config.out("metrics.csv"))?;
        let report = build_report(&results, &config.stats);
        write_text(config, ledger, "stats.txt", &report.render_text())?;
        write_text(config, ledger, "stats.json", &report.to_json()?)?;
        Ok(report)
    })
}

fn fmt_num(v: f64) -> String {
    format!("{v:.2}")
}

/// One scatter panel with a least-squares line. Returns `None` when there
/// are no points.
pub fn render_panel(title: &str, points: &[(f64, f64)]) -> Option<String> {
    if points.is_empty() {
        return None;
    }
    let (w, h) = (420.0, 320.0);
    let (left, right, top, bottom) = (56.0, 16.0, 34.0, 44.0);
    let ymin = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let ymax = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let pad = ((ymax - ymin) * 0.1).max(0.02);
    let (y0, y1) = (((ymin - pad) * 50.0).floor() / 50.0, ((ymax + pad) * 50.0).ceil() / 50.0);
    let sx = |x: f64| left + (x + 0.05) / 1.1 * (w - left - right);
    let sy = |y: f64| top + (y1 - y) / (y1 - y0) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{title}</text>"#, w / 2.0);
    let (ax0, ax1, ay0, ay1) = (left, w - right, top, h - bottom);
    let _ = writeln!(
        s,
        r#"<path d="M{ax0} {ay0} L{ax0} {ay1} L{ax1} {ay1}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let x = i as f64 * 0.25;
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{ay1}" x2="{0}" y2="{1}" stroke="black"/><text x="{0}" y="{2}" text-anchor="middle">{3}</text>"#,
            fmt_num(sx(x)),
            ay1 + 4.0,
            ay1 + 16.0,
            x
        );
    }
    for i in 0..=4 {
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{1}" x2="{ax0}" y2="{1}" stroke="black"/><text x="{2}" y="{3}" text-anchor="end">{4:.3}</text>"#,
            ax0 - 4.0,
            fmt_num(sy(y)),
            ax0 - 6.0,
            fmt_num(sy(y) + 4.0),
            y
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">female ratio in training</text>"#,
        (ax0 + ax1) / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{0}" text-anchor="middle" transform="rotate(-90 14 {0})">AUROC</text>"#,
        (ay0 + ay1) / 2.0
    );
    for &(x, y) in points {
        let _ = writeln!(
            s,
            r##"<circle cx="{}" cy="{}" r="3" fill="#1f77b4" fill-opacity="0.6"/>"##,
            fmt_num(sx(x)),
            fmt_num(sy(y))
        );
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx > 0.0 {
        let m = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx;
        let b = my - m * mx;
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#d62728" stroke-width="2"/>"##,
            fmt_num(sx(0.0)),
            fmt_num(sy(b)),
            fmt_num(sx(1.0)),
            fmt_num(sy(b + m))
        );
    }
    s.push_str("</svg>\n");
    Some(s)
}

/// One AUROC panel per (model, sex) with at least one value.
pub fn emit_plots(results: &[MetricResult], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut cells: BTreeMap<(ModelId, Sex), Vec<(f64, f64)>> = BTreeMap::new();
    for r in results {
        let entry = cells.entry((r.key.model, r.sex)).or_default();
        if let Some(a) = r.auroc {
            entry.push((r.key.ratio, a));
        }
    }
    let mut out = Vec::new();
    for ((model, sex), points) in cells {
        let title = format!("{model}, evaluated on {sex} patients");
        match render_panel(&title, &points) {
            Some(svg) => {
                let path = dir.join(format!("{}_{}_auroc.svg", model.as_str(), sex.as_str()));
                write_atomic(&path, svg.as_bytes())?;
                out.push(path);
            }
            None => warn!("no AUROC values for {model} {sex}; panel omitted"),
        }
    }
    Ok(out)
}

/// Plots and a plain-text report from the metric and stats outputs.
pub fn run_report(config: &RunConfig, ledger: &mut RunLedger) -> Result<PathBuf> {
    ledger.stage("report", |ledger| {
        let results = read_metrics_csv(&config.out("metrics.csv"))?;
        let report = build_report(&results, &config.stats);
        let plots = emit_plots(&results, &config.out("plots"))?;
        for p in &plots {
            ledger.add_artifact(config, p);
        }
        let mut text = String::new();
        let _ = writeln!(text, "Runs evaluated: {}", results.len() / 2);
        let _ = writeln!(text);
        let _ = writeln!(text, "Mean ± std per sex");
        text.push_str(&format_summary_table(&aggregate(&results)));
        let _ = writeln!(text);
        text.push_str(&report.render_text());
        let _ = writeln!(text);
        let _ = writeln!(text, "Plots:");
        for p in &plots {
            let _ = writeln!(text, "  {}", p.strip_prefix(&config.output).unwrap_or(p).display());
        }
        write_text(config, ledger, "report.txt", &text)
    })
}

/// The whole experiment. Job failures are recorded in the ledger; stage
/// failures abort and are returned after the ledger is saved.
pub fn run_pipeline(config: &RunConfig) -> Result<RunLedger> {
    config.validate()?;
    fs::create_dir_all(&config.output).map_err(|e| Error::io(&config.output, e))?;
    let mut ledger = RunLedger {
        master_seed: config.master_seed,
        workers: config.workers.unwrap_or_else(rayon::current_num_threads),
        ..RunLedger::default()
    };
    let outcome = with_workers(config.workers, || pipeline_stages(config, &mut ledger))?;
    ledger.save(config)?;
    outcome.map(|()| ledger)
}

/// A single CLI step. Steps up to `TrainLr` rerun their (cached) inputs;
/// the later ones read what is already under the output directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Audit,
    Extract,
    Split,
    TrainLr,
    Evaluate,
    Stats,
    Report,
}

/// Runs one step on the configured worker pool.
pub fn run_step(config: &RunConfig, step: Step) -> Result<RunLedger> {
    match step {
        Step::Audit => {
            for p in [&config.metadata, &config.images] {
                if !p.exists() {
                    return Err(Error::MissingFile(p.clone()));
                }
            }
            config.validate_values()?;
        }
        Step::Extract | Step::Split | Step::TrainLr => config.validate()?,
        Step::Evaluate | Step::Stats | Step::Report => config.validate_values()?,
    }
    fs::create_dir_all(&config.output).map_err(|e| Error::io(&config.output, e))?;
    let mut ledger = RunLedger {
        master_seed: config.master_seed,
        workers: config.workers.unwrap_or_else(rayon::current_num_threads),
        ..RunLedger::default()
    };
    with_workers(config.workers, || -> Result<()> {
        match step {
            Step::Audit => run_audit(config, &mut ledger).map(drop),
            Step::Extract => prepare(config, &mut ledger, false).map(drop),
            Step::Split => prepare(config, &mut ledger, true).map(drop),
            Step::TrainLr => train_all(config, &mut ledger),
            Step::Evaluate => run_evaluate(config, &mut ledger).map(drop),
            Step::Stats => run_stats(config, &mut ledger).map(drop),
            Step::Report => run_report(config, &mut ledger).map(drop),
        }
    })??;
    Ok(ledger)
}

type Prepared = (BTreeMap<String, FeatureRow>, Option<SplitPlan>);

fn prepare(config: &RunConfig, ledger: &mut RunLedger, split: bool) -> Result<Prepared> {
    let records = ledger.stage("ingest", |_| load_records(config))?;
    info!("cohort: {}", summarize(&records));
    let rows = run_extract(config, &records, ledger)?;
    let kept: BTreeSet<&str> = rows.iter().map(|r| r.record.image_id.as_str()).collect();
    let records: Vec<LesionRecord> = records
        .into_iter()
        .filter(|r| kept.contains(r.image_id.as_str()))
        .collect();
    let plan = if split { Some(run_split(config, &records, ledger)?) } else { None };
    let features = rows.into_iter().map(|r| (r.record.image_id.clone(), r)).collect();
    Ok((features, plan))
}

fn train_all(config: &RunConfig, ledger: &mut RunLedger) -> Result<()> {
    let (mut features, plan) = prepare(config, ledger, true)?;
    let plan = plan.expect("split requested");
    let augmented = run_augmented_features(config, &plan, &features, ledger)?;
    features.extend(augmented.into_iter().map(|r| (r.record.image_id.clone(), r)));
    run_training(config, &plan, &features, ledger)
}

fn pipeline_stages(config: &RunConfig, ledger: &mut RunLedger) -> Result<()> {
    run_audit(config, ledger)?;
    train_all(config, ledger)?;
    run_evaluate(config, ledger)?;
    run_stats(config, ledger)?;
    run_report(config, ledger)?;
    Ok(())
}
