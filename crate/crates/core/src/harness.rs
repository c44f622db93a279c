//! The evaluation protocol: repeated random splits, codebook fitting on
//! training slides only, (augmented) bag-of-features histograms, inner-CV
//! cost selection, SVM training and test accuracy, over the configuration
//! grid of modality × cluster count × augmentation × classifier.
//!
//! Seeds: repetition `r` uses split seed `derive_seed(base_seed, [SPLIT, r])`
//! for every configuration, so all cells of a grid see identical partitions.
//! Codebook, augmentation, inner-CV and SVM seeds are derived from the split
//! seed, which makes a grid cell identical to the same configuration run on
//! its own.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment_assignments, AugmentError, AugmentationPolicy};
use crate::bof::{
    histogram_from_assignments, kmeans_fit_traced, BofError, BofHistogram, Codebook, KMeansParams, CLUSTER_COUNTS,
};
use crate::features::FeatureStore;
use crate::manifest::{split_train_test, Manifest, ManifestError, Modality, Split, WsiRecord};
use crate::patches::{DEFAULT_MIN_COVERAGE, DEFAULT_PATCHES_PER_WSI, DEFAULT_PATCH_SIZE};
use crate::seed::{derive_seed, hash_str, stream};
use crate::svm::{
    rbf_gamma_default, select_c, svm_train_lenient, Kernel, SmoParams, SvmError, COST_GRID, DEFAULT_FOLDS,
};

pub const DEFAULT_REPETITIONS: usize = 32;
pub const DEFAULT_TRAIN_RATIO: f64 = 0.8;
pub const RESULTS_JSON: &str = "results.json";
pub const RESULTS_CSV: &str = "results.csv";

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Bof(#[from] BofError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Svm(#[from] SvmError),
    #[error("no features for wsi `{0}`")]
    MissingFeatures(String),
    #[error("wsi `{wsi_id}` has {found} patch descriptors, expected {expected}")]
    PatchCount {
        wsi_id: String,
        expected: usize,
        found: usize,
    },
    #[error("test slide `{0}` reached a training stage")]
    Leakage(String),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("split {rep} (seed {seed}): {source}")]
    Split {
        rep: usize,
        seed: u64,
        #[source]
        source: StageError,
    },
    #[error("experiment aborted after {failures} split failure(s); first: {first}")]
    AbortedAfterSplitFailures { failures: usize, first: Box<HarnessError> },
    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),
    #[error("no records to report")]
    EmptyReport,
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Classifier {
    #[serde(rename = "linear")]
    LinearSvm,
    #[serde(rename = "rbf")]
    RbfSvm,
}

impl Classifier {
    pub const ALL: [Classifier; 2] = [Classifier::LinearSvm, Classifier::RbfSvm];

    pub fn as_str(self) -> &'static str {
        match self {
            Classifier::LinearSvm => "linear",
            Classifier::RbfSvm => "rbf",
        }
    }
}

impl fmt::Display for Classifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Classifier {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" | "linearsvm" => Ok(Classifier::LinearSvm),
            "rbf" | "rbfsvm" => Ok(Classifier::RbfSvm),
            other => Err(HarnessError::InvalidConfig(format!("unknown classifier `{other}`"))),
        }
    }
}

/// One cell of the grid plus the protocol constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub modality: Modality,
    pub k_clusters: usize,
    pub augmentation: AugmentationPolicy,
    pub classifier: Classifier,
    pub repetitions: usize,
    pub train_ratio: f64,
    pub base_seed: u64,
    /// Patch descriptors expected per slide in the feature store.
    pub n_patches: usize,
    pub patch_size: u32,
    pub min_coverage: f64,
    pub folds: usize,
    pub cost_grid: Vec<f64>,
    /// Fixed RBF gamma; `None` derives it from the training histograms.
    pub gamma: Option<f64>,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    pub svm_tol: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            modality: Modality::Paraffin,
            k_clusters: 32,
            augmentation: AugmentationPolicy::NONE,
            classifier: Classifier::LinearSvm,
            repetitions: DEFAULT_REPETITIONS,
            train_ratio: DEFAULT_TRAIN_RATIO,
            base_seed: 0,
            n_patches: DEFAULT_PATCHES_PER_WSI,
            patch_size: DEFAULT_PATCH_SIZE,
            min_coverage: DEFAULT_MIN_COVERAGE,
            folds: DEFAULT_FOLDS,
            cost_grid: COST_GRID.to_vec(),
            gamma: None,
            kmeans_max_iter: crate::bof::DEFAULT_MAX_ITER,
            kmeans_tol: crate::bof::DEFAULT_TOL,
            svm_tol: crate::svm::DEFAULT_TOL,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        if self.repetitions == 0 {
            return bad("repetitions must be >= 1".into());
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return bad(format!("train_ratio must lie in (0, 1), got {}", self.train_ratio));
        }
        if self.k_clusters == 0 {
            return bad("k_clusters must be >= 1".into());
        }
        if self.n_patches == 0 {
            return bad("n_patches must be >= 1".into());
        }
        if self.folds < 2 {
            return bad("folds must be >= 2".into());
        }
        if self.cost_grid.is_empty() || self.cost_grid.iter().any(|c| !(*c > 0.0)) {
            return bad("cost grid must be non-empty and positive".into());
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0) {
                return bad(format!("gamma must be positive, got {g}"));
            }
        }
        self.augmentation
            .validate()
            .map_err(|e| HarnessError::InvalidConfig(e.to_string()))
    }

    /// Seed of repetition `rep`; independent of every per-cell setting.
    pub fn split_seed(&self, rep: usize) -> u64 {
        derive_seed(self.base_seed, &[stream::SPLIT, rep as u64])
    }
}

/// Everything one split produced, kept for auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitOutcome {
    pub split: Split,
    pub accuracy: f64,
    pub n_test: usize,
    pub correct: usize,
    pub chosen_c: f64,
    /// Slides whose patch descriptors were used to fit the codebook.
    pub codebook_input_ids: Vec<String>,
    /// Slides whose histograms were used for inner CV and SVM training.
    pub svm_input_ids: Vec<String>,
    /// Patch count of every training histogram, in training order.
    pub train_patch_counts: Vec<usize>,
    pub test_patch_counts: Vec<usize>,
    /// Largest |Σ bins − 1| over all train and test histograms.
    pub max_histogram_sum_error: f64,
    pub min_histogram_bin: f64,
}

/// A split with its codebook and per-slide centroid assignments; shared by
/// every augmentation/classifier combination of one cluster count.
struct SplitContext<'a> {
    split: Split,
    records: Vec<&'a WsiRecord>,
    codebook: Codebook,
    codebook_input_ids: Vec<String>,
    /// Centroid index of every patch, keyed by the position in `records`.
    assignments: Vec<Vec<usize>>,
}

fn modality_records(manifest: &Manifest, modality: Modality) -> Vec<&WsiRecord> {
    manifest.by_modality(modality)
}

fn check_store(records: &[&WsiRecord], store: &FeatureStore, n_patches: usize) -> Result<(), StageError> {
    for r in records {
        let group = store
            .get(&r.wsi_id)
            .ok_or_else(|| StageError::MissingFeatures(r.wsi_id.clone()))?;
        if !store.partial && group.vectors.len() != n_patches {
            return Err(StageError::PatchCount {
                wsi_id: r.wsi_id.clone(),
                expected: n_patches,
                found: group.vectors.len(),
            });
        }
        if group.vectors.is_empty() {
            return Err(StageError::MissingFeatures(r.wsi_id.clone()));
        }
    }
    Ok(())
}

impl<'a> SplitContext<'a> {
    fn build(
        config: &ExperimentConfig,
        manifest: &'a Manifest,
        store: &FeatureStore,
        k: usize,
        split_seed: u64,
    ) -> Result<Self, StageError> {
        let records = modality_records(manifest, config.modality);
        check_store(&records, store, config.n_patches)?;
        let split = split_train_test(&records, config.train_ratio, split_seed)?;
        let test_ids: HashSet<&str> = split.test.iter().map(String::as_str).collect();

        let mut codebook_input_ids = Vec::with_capacity(split.train.len());
        let mut train_vectors: Vec<&[f64]> = Vec::new();
        for id in &split.train {
            if test_ids.contains(id.as_str()) {
                return Err(StageError::Leakage(id.clone()));
            }
            let group = store.get(id).ok_or_else(|| StageError::MissingFeatures(id.clone()))?;
            codebook_input_ids.push(id.clone());
            train_vectors.extend(group.vectors.iter().map(|v| v.values.as_slice()));
        }
        let params = KMeansParams {
            k,
            seed: derive_seed(split_seed, &[stream::CODEBOOK, k as u64]),
            max_iter: config.kmeans_max_iter,
            tol: config.kmeans_tol,
        };
        let codebook = kmeans_fit_traced(&train_vectors, &params, |_, _| {})?;

        let assignments = records
            .iter()
            .map(|r| {
                let group = store.get(&r.wsi_id).expect("checked above");
                group
                    .vectors
                    .iter()
                    .map(|v| codebook.assign(&v.values))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            split,
            records,
            codebook,
            codebook_input_ids,
            assignments,
        })
    }

    fn position(&self, id: &str) -> usize {
        self.records
            .iter()
            .position(|r| r.wsi_id == id)
            .expect("split ids come from records")
    }

    fn evaluate(
        &self,
        config: &ExperimentConfig,
        policy: &AugmentationPolicy,
        classifier: Classifier,
    ) -> Result<SplitOutcome, StageError> {
        let split_seed = self.split.seed;
        let k = self.codebook.k;
        let test_ids: HashSet<&str> = self.split.test.iter().map(String::as_str).collect();

        let mut train_hist: Vec<BofHistogram> = Vec::new();
        let mut train_y = Vec::new();
        let mut groups = Vec::new();
        for (g, id) in self.split.train.iter().enumerate() {
            let pos = self.position(id);
            let seed = derive_seed(split_seed, &[stream::AUGMENT, hash_str(id)]);
            let hs = augment_assignments(id, k, &self.assignments[pos], policy, seed);
            let y = self.records[pos].label.sign();
            for h in hs {
                train_hist.push(h);
                train_y.push(y);
                groups.push(g);
            }
        }
        let test_hist: Vec<(BofHistogram, f64)> = self
            .split
            .test
            .iter()
            .map(|id| {
                let pos = self.position(id);
                (
                    histogram_from_assignments(id, k, &self.assignments[pos]),
                    self.records[pos].label.sign(),
                )
            })
            .collect();

        let mut svm_input_ids: Vec<String> = Vec::new();
        for h in &train_hist {
            if test_ids.contains(h.wsi_id.as_str()) {
                return Err(StageError::Leakage(h.wsi_id.clone()));
            }
            if svm_input_ids.last() != Some(&h.wsi_id) {
                svm_input_ids.push(h.wsi_id.clone());
            }
        }

        let x: Vec<&[f64]> = train_hist.iter().map(|h| h.bins.as_slice()).collect();
        let kernel = match classifier {
            Classifier::LinearSvm => Kernel::Linear,
            Classifier::RbfSvm => Kernel::Rbf {
                gamma: match config.gamma {
                    Some(g) => g,
                    None => rbf_gamma_default(&x)?,
                },
            },
        };
        let selection = select_c(
            &x,
            &train_y,
            Some(&groups),
            &config.cost_grid,
            config.folds,
            kernel,
            derive_seed(split_seed, &[stream::INNER_CV]),
        )?;
        let params = SmoParams {
            c: selection.chosen_c,
            tol: config.svm_tol,
            max_passes: None,
            seed: derive_seed(split_seed, &[stream::SVM]),
        };
        let model = svm_train_lenient(&x, &train_y, kernel, &params)?;

        let mut correct = 0;
        for (h, y) in &test_hist {
            if model.predict(&h.bins)? == *y {
                correct += 1;
            }
        }
        let all_hist = train_hist.iter().chain(test_hist.iter().map(|(h, _)| h));
        let (mut max_err, mut min_bin) = (0.0f64, f64::INFINITY);
        for h in all_hist {
            max_err = max_err.max((h.bins.iter().sum::<f64>() - 1.0).abs());
            min_bin = min_bin.min(h.bins.iter().copied().fold(f64::INFINITY, f64::min));
        }
        let n_test = test_hist.len();
        Ok(SplitOutcome {
            split: self.split.clone(),
            accuracy: correct as f64 / n_test as f64,
            n_test,
            correct,
            chosen_c: selection.chosen_c,
            codebook_input_ids: self.codebook_input_ids.clone(),
            svm_input_ids,
            train_patch_counts: train_hist.iter().map(|h| h.patch_count).collect(),
            test_patch_counts: test_hist.iter().map(|(h, _)| h.patch_count).collect(),
            max_histogram_sum_error: max_err,
            min_histogram_bin: min_bin,
        })
    }
}

/// Runs the whole pipeline on one split and returns the audited outcome.
pub fn run_single_split_detailed(
    config: &ExperimentConfig,
    manifest: &Manifest,
    store: &FeatureStore,
    split_seed: u64,
) -> Result<SplitOutcome, StageError> {
    let ctx = SplitContext::build(config, manifest, store, config.k_clusters, split_seed)?;
    ctx.evaluate(config, &config.augmentation, config.classifier)
}

/// Test accuracy of one split.
pub fn run_single_split(
    config: &ExperimentConfig,
    manifest: &Manifest,
    store: &FeatureStore,
    split_seed: u64,
) -> Result<f64, StageError> {
    run_single_split_detailed(config, manifest, store, split_seed).map(|o| o.accuracy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub config: ExperimentConfig,
    pub per_split_accuracy: Vec<f64>,
    pub per_split_chosen_c: Vec<f64>,
    pub mean_accuracy: f64,
    /// Population standard deviation.
    pub std_accuracy: f64,
    pub wall_time_s: f64,
}

pub fn mean_and_population_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ResultRecord {
    fn from_outcomes(config: ExperimentConfig, outcomes: &[SplitOutcome], wall_time_s: f64) -> Self {
        let per_split_accuracy: Vec<f64> = outcomes.iter().map(|o| o.accuracy).collect();
        let (mean_accuracy, std_accuracy) = mean_and_population_std(&per_split_accuracy);
        Self {
            config,
            per_split_chosen_c: outcomes.iter().map(|o| o.chosen_c).collect(),
            per_split_accuracy,
            mean_accuracy,
            std_accuracy,
            wall_time_s,
        }
    }
}

fn collect_failures<T>(results: Vec<(usize, u64, Result<T, StageError>)>) -> Result<Vec<T>, HarnessError> {
    let mut ok = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (rep, seed, r) in results {
        match r {
            Ok(v) => ok.push(v),
            Err(source) => failures.push(HarnessError::Split { rep, seed, source }),
        }
    }
    if failures.is_empty() {
        Ok(ok)
    } else {
        let n = failures.len();
        Err(HarnessError::AbortedAfterSplitFailures {
            failures: n,
            first: Box::new(failures.swap_remove(0)),
        })
    }
}

/// All repetitions of one configuration, with the per-split outcomes.
pub fn run_experiment_detailed(
    config: &ExperimentConfig,
    manifest: &Manifest,
    store: &FeatureStore,
) -> Result<(ResultRecord, Vec<SplitOutcome>), HarnessError> {
    config.validate()?;
    let start = Instant::now();
    let results: Vec<_> = (0..config.repetitions)
        .into_par_iter()
        .map(|rep| {
            let seed = config.split_seed(rep);
            (rep, seed, run_single_split_detailed(config, manifest, store, seed))
        })
        .collect();
    let outcomes = collect_failures(results)?;
    let record = ResultRecord::from_outcomes(config.clone(), &outcomes, start.elapsed().as_secs_f64());
    Ok((record, outcomes))
}

pub fn run_experiment(
    config: &ExperimentConfig,
    manifest: &Manifest,
    store: &FeatureStore,
) -> Result<ResultRecord, HarnessError> {
    run_experiment_detailed(config, manifest, store).map(|(r, _)| r)
}

/// Which cells of the grid to run. `None` modalities means every modality
/// present in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub modalities: Option<Vec<Modality>>,
    pub k_values: Vec<usize>,
    pub augmentations: Vec<AugmentationPolicy>,
    pub classifiers: Vec<Classifier>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            modalities: None,
            k_values: CLUSTER_COUNTS.to_vec(),
            augmentations: AugmentationPolicy::GRID.to_vec(),
            classifiers: Classifier::ALL.to_vec(),
        }
    }
}

impl GridSpec {
    pub fn cells(&self, manifest: &Manifest) -> Vec<(Modality, usize, AugmentationPolicy, Classifier)> {
        let modalities = self.modalities.clone().unwrap_or_else(|| manifest.modalities());
        let mut cells = Vec::new();
        for &m in &modalities {
            for &k in &self.k_values {
                for &a in &self.augmentations {
                    for &c in &self.classifiers {
                        cells.push((m, k, a, c));
                    }
                }
            }
        }
        cells
    }
}

/// Per-split outcomes of every grid cell, in grid order.
pub type GridOutcomes = Vec<(ResultRecord, Vec<SplitOutcome>)>;

/// Runs the grid. `template` supplies the protocol constants; its
/// modality/k/augmentation/classifier fields are overridden per cell.
pub fn run_grid_detailed(
    manifest: &Manifest,
    store: &FeatureStore,
    template: &ExperimentConfig,
    grid: &GridSpec,
) -> Result<GridOutcomes, HarnessError> {
    template.validate()?;
    let cells = grid.cells(manifest);
    let modalities: Vec<Modality> = cells.iter().map(|c| c.0).collect::<BTreeSet<_>>().into_iter().collect();
    let units: Vec<(Modality, usize)> = modalities
        .iter()
        .flat_map(|&m| (0..template.repetitions).map(move |r| (m, r)))
        .collect();

    // Each (modality, repetition) unit fits one codebook per k and evaluates
    // every augmentation/classifier pair on it.
    type UnitResult = Vec<((Modality, usize, AugmentationPolicy, Classifier), SplitOutcome, f64)>;
    let results: Vec<(usize, u64, Result<UnitResult, StageError>)> = units
        .par_iter()
        .map(|&(modality, rep)| {
            let seed = template.split_seed(rep);
            let run = || -> Result<UnitResult, StageError> {
                let mut out = Vec::new();
                for &k in &grid.k_values {
                    let mine: Vec<_> = cells.iter().filter(|c| c.0 == modality && c.1 == k).collect();
                    if mine.is_empty() {
                        continue;
                    }
                    let config = ExperimentConfig {
                        modality,
                        k_clusters: k,
                        ..template.clone()
                    };
                    let t0 = Instant::now();
                    let ctx = SplitContext::build(&config, manifest, store, k, seed)?;
                    let share = t0.elapsed().as_secs_f64() / mine.len() as f64;
                    for cell in mine {
                        let t = Instant::now();
                        let outcome = ctx.evaluate(&config, &cell.2, cell.3)?;
                        out.push((*cell, outcome, share + t.elapsed().as_secs_f64()));
                    }
                }
                Ok(out)
            };
            (rep, seed, run())
        })
        .collect();
    let per_unit = collect_failures(results)?;

    let mut records = Vec::with_capacity(cells.len());
    for cell in &cells {
        let mut outcomes = Vec::with_capacity(template.repetitions);
        let mut wall = 0.0;
        for unit in &per_unit {
            for (c, o, t) in unit {
                if c == cell {
                    outcomes.push(o.clone());
                    wall += t;
                }
            }
        }
        let config = ExperimentConfig {
            modality: cell.0,
            k_clusters: cell.1,
            augmentation: cell.2,
            classifier: cell.3,
            ..template.clone()
        };
        records.push((ResultRecord::from_outcomes(config, &outcomes, wall), outcomes));
    }
    Ok(records)
}

pub fn run_grid_with(
    manifest: &Manifest,
    store: &FeatureStore,
    template: &ExperimentConfig,
    grid: &GridSpec,
) -> Result<Vec<ResultRecord>, HarnessError> {
    Ok(run_grid_detailed(manifest, store, template, grid)?
        .into_iter()
        .map(|(r, _)| r)
        .collect())
}

/// Full grid with default protocol constants.
pub fn run_grid(manifest: &Manifest, store: &FeatureStore, base_seed: u64) -> Result<Vec<ResultRecord>, HarnessError> {
    let template = ExperimentConfig {
        base_seed,
        ..ExperimentConfig::default()
    };
    run_grid_with(manifest, store, &template, &GridSpec::default())
}

/// Serialized results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Always "population".
    pub std_kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
    pub records: Vec<ResultRecord>,
}

impl Report {
    pub fn new(records: Vec<ResultRecord>, run_config: Option<serde_json::Value>) -> Self {
        Self {
            std_kind: "population".into(),
            run_config,
            records,
        }
    }

    /// JSON with wall times zeroed, for reproducibility comparisons.
    pub fn canonical_json(&self) -> String {
        let mut clone = self.clone();
        for r in &mut clone.records {
            r.wall_time_s = 0.0;
        }
        serde_json::to_string_pretty(&clone).expect("report serializes")
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn row_key(r: &ResultRecord) -> (usize, String) {
    (r.config.k_clusters, r.config.augmentation.to_string())
}

fn column_key(r: &ResultRecord) -> String {
    format!("{}_{}", r.config.modality, r.config.classifier)
}

/// Pivot table: one row per (k, augmentation), one column per
/// (modality, classifier), cells `mean ± std`.
pub fn pivot_csv(records: &[ResultRecord]) -> String {
    let mut rows: Vec<(usize, String)> = Vec::new();
    let mut cols: Vec<String> = Vec::new();
    for r in records {
        if !rows.contains(&row_key(r)) {
            rows.push(row_key(r));
        }
        if !cols.contains(&column_key(r)) {
            cols.push(column_key(r));
        }
    }
    let mut out = String::from("# cells: mean ± population std of per-split test accuracy\n");
    out.push_str("k,augmentation");
    for c in &cols {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for row in &rows {
        out.push_str(&format!("{},{}", row.0, row.1));
        for col in &cols {
            out.push(',');
            if let Some(r) = records.iter().find(|r| row_key(r) == *row && column_key(r) == *col) {
                out.push_str(&format!("{:.4} ± {:.4}", r.mean_accuracy, r.std_accuracy));
            }
        }
        out.push('\n');
    }
    out
}

/// Writes `results.json` and `results.csv` into `out_dir`.
pub fn emit_report(report: &Report, out_dir: &Path) -> Result<(PathBuf, PathBuf), HarnessError> {
    if report.records.is_empty() {
        return Err(HarnessError::EmptyReport);
    }
    std::fs::create_dir_all(out_dir)?;
    let json = out_dir.join(RESULTS_JSON);
    let csv = out_dir.join(RESULTS_CSV);
    std::fs::write(&json, serde_json::to_string_pretty(report)?)?;
    std::fs::write(&csv, pivot_csv(&report.records))?;
    Ok((json, csv))
}
