//! `key = value` run configuration for the `grid` command.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use histobof::features::HANDCRAFTED_DIM;
use histobof::{ExperimentConfig, GridSpec};
use serde::Serialize;

/// Environment variable that overrides the base seed of every command.
pub const SEED_ENV: &str = "HISTOBOF_SEED";

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Extractor {
    /// 120-dimensional colour/gradient descriptor computed here.
    Handcrafted,
    /// Descriptors produced by an external tool and loaded from a store file.
    Imported,
}

/// Everything needed to reproduce a grid run.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub feature_store: Option<PathBuf>,
    /// Extract handcrafted descriptors from the manifest images on the fly.
    pub raw_images: bool,
    pub output_dir: PathBuf,
    pub extractor: Extractor,
    pub experiment: ExperimentConfig,
    pub grid: GridSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            feature_store: None,
            raw_images: false,
            output_dir: PathBuf::from("results"),
            extractor: Extractor::Handcrafted,
            experiment: ExperimentConfig::default(),
            grid: GridSpec::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| ConfigError(format!("bad value for `{key}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return err(format!("`{key}` needs at least one value"));
    }
    Ok(items)
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => err(format!("bad value for `{key}`: `{other}` is not a boolean")),
    }
}

impl RunConfig {
    /// Applies one setting. Relative paths are joined onto `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<(), ConfigError> {
        let path = || base.join(value.trim());
        let e = &mut self.experiment;
        match key.trim() {
            "manifest" => self.manifest = Some(path()),
            "feature_store" => self.feature_store = Some(path()),
            "raw_images" => self.raw_images = parse_bool(key, value)?,
            "output_dir" => self.output_dir = path(),
            "extractor" => {
                self.extractor = <Extractor as clap::ValueEnum>::from_str(value.trim(), true)
                    .map_err(|e| ConfigError(format!("bad value for `extractor`: {e}")))?
            }
            "repetitions" => e.repetitions = parse(key, value)?,
            "train_ratio" => e.train_ratio = parse(key, value)?,
            "base_seed" | "seed" => e.base_seed = parse(key, value)?,
            "n_patches" => e.n_patches = parse(key, value)?,
            "patch_size" => e.patch_size = parse(key, value)?,
            "min_coverage" => e.min_coverage = parse(key, value)?,
            "folds" => e.folds = parse(key, value)?,
            "cost_grid" => e.cost_grid = parse_list(key, value)?,
            "gamma" => e.gamma = Some(parse(key, value)?),
            "kmeans_max_iter" => e.kmeans_max_iter = parse(key, value)?,
            "kmeans_tol" => e.kmeans_tol = parse(key, value)?,
            "svm_tol" => e.svm_tol = parse(key, value)?,
            "modalities" => self.grid.modalities = Some(parse_list(key, value)?),
            "k_values" => self.grid.k_values = parse_list(key, value)?,
            "augmentations" => self.grid.augmentations = parse_list(key, value)?,
            "classifiers" => self.grid.classifiers = parse_list(key, value)?,
            other => return err(format!("unknown configuration key `{other}`")),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, base: &Path) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return err(format!("line {}: expected `key = value`", i + 1));
            };
            self.set(key, value, base)
                .map_err(|e| ConfigError(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = Self::default();
        config.apply_text(&text, path.parent().unwrap_or(Path::new(".")))?;
        Ok(config)
    }

    /// Narrows the grid with `key=value` filters such as
    /// `modality=paraffin,k=32,aug=aug1,clf=rbf`.
    pub fn restrict(&mut self, only: &str) -> Result<(), ConfigError> {
        for item in only.split(',').filter(|s| !s.trim().is_empty()) {
            let Some((key, value)) = item.split_once('=') else {
                return err(format!("bad --only item `{item}`: expected key=value"));
            };
            match key.trim() {
                "modality" => self.grid.modalities = Some(vec![parse(key, value)?]),
                "k" => self.grid.k_values = vec![parse(key, value)?],
                "aug" | "augmentation" => self.grid.augmentations = vec![parse(key, value)?],
                "clf" | "classifier" => self.grid.classifiers = vec![parse(key, value)?],
                other => return err(format!("unknown --only key `{other}` (use modality, k, aug, clf)")),
            }
        }
        Ok(())
    }

    /// Checks the feature source and that every configured path exists.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.experiment.validate().map_err(|e| ConfigError(e.to_string()))?;
        let Some(manifest) = &self.manifest else {
            return err("no manifest configured");
        };
        if !manifest.is_file() {
            return err(format!("manifest {} does not exist", manifest.display()));
        }
        match (&self.feature_store, self.raw_images) {
            (Some(_), true) => return err("configure exactly one feature source: feature_store or raw_images"),
            (None, false) => return err("no feature source: set feature_store or raw_images = true"),
            (Some(store), false) if !store.is_file() => {
                return err(format!("feature store {} does not exist", store.display()))
            }
            (None, true) if self.extractor == Extractor::Imported => {
                return err("raw_images requires the handcrafted extractor")
            }
            _ => {}
        }
        if self.grid.k_values.contains(&0) {
            return err("k_values must be positive");
        }
        for policy in &self.grid.augmentations {
            policy.validate().map_err(|e| ConfigError(e.to_string()))?;
        }
        Ok(())
    }

    pub fn expected_dimension(&self) -> Option<usize> {
        (self.extractor == Extractor::Handcrafted).then_some(HANDCRAFTED_DIM)
    }
}

/// Seed from `HISTOBOF_SEED`, if set.
pub fn env_seed() -> Result<Option<u64>, ConfigError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|e| ConfigError(format!("{SEED_ENV}={v:?} is not a valid seed: {e}"))),
        Err(_) => Ok(None),
    }
}
