//! Slide manifests and seeded train/test splitting.
//!
//! A manifest is a UTF-8 CSV file with the header
//! `wsi_id,image_path,modality,label`. Lines starting with `#` are comments.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_from_seed;

pub const MANIFEST_HEADER: [&str; 4] = ["wsi_id", "image_path", "modality", "label"];

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest file not found: {0}")]
    MissingFile(PathBuf),
    #[error("manifest parse error at line {line}: {message}")]
    ParseError { line: u64, message: String },
    #[error("duplicate wsi_id `{0}`")]
    DuplicateId(String),
    #[error("unknown modality `{0}`")]
    UnknownModality(String),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("too few records for split: {n} records with train ratio {ratio}")]
    TooFewRecords { n: usize, ratio: f64 },
    #[error("train ratio must lie in (0, 1), got {0}")]
    InvalidRatio(f64),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Section type of a slide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Frozen,
    Paraffin,
    /// Frozen section rendered into the paraffin domain by an external translation model.
    #[serde(rename = "translated")]
    TranslatedParaffin,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Frozen, Modality::Paraffin, Modality::TranslatedParaffin];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Frozen => "frozen",
            Modality::Paraffin => "paraffin",
            Modality::TranslatedParaffin => "translated",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = ManifestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "frozen" => Ok(Modality::Frozen),
            "paraffin" => Ok(Modality::Paraffin),
            "translated" => Ok(Modality::TranslatedParaffin),
            other => Err(ManifestError::UnknownModality(other.to_string())),
        }
    }
}

/// Diagnostic class of a slide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Papillary,
    Follicular,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Papillary, Label::Follicular];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Papillary => "papillary",
            Label::Follicular => "follicular",
        }
    }

    /// Binary SVM target: papillary is `+1`, follicular is `-1`.
    pub fn sign(self) -> f64 {
        match self {
            Label::Papillary => 1.0,
            Label::Follicular => -1.0,
        }
    }

    pub fn from_sign(value: f64) -> Label {
        if value >= 0.0 {
            Label::Papillary
        } else {
            Label::Follicular
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = ManifestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "papillary" => Ok(Label::Papillary),
            "follicular" => Ok(Label::Follicular),
            other => Err(ManifestError::UnknownLabel(other.to_string())),
        }
    }
}

/// One slide of the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WsiRecord {
    pub wsi_id: String,
    /// Path relative to the manifest's directory.
    pub image_path: PathBuf,
    pub modality: Modality,
    pub label: Label,
}

/// Parsed manifest plus the directory used to resolve relative image paths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub records: Vec<WsiRecord>,
}

impl Manifest {
    pub fn new(base_dir: impl Into<PathBuf>, records: Vec<WsiRecord>) -> Result<Self, ManifestError> {
        check_unique(&records)?;
        Ok(Self {
            base_dir: base_dir.into(),
            records,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let records = load_manifest(path)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { base_dir, records })
    }

    pub fn resolve(&self, record: &WsiRecord) -> PathBuf {
        self.base_dir.join(&record.image_path)
    }

    /// Modalities present, in canonical order.
    pub fn modalities(&self) -> Vec<Modality> {
        Modality::ALL
            .into_iter()
            .filter(|m| self.records.iter().any(|r| r.modality == *m))
            .collect()
    }

    pub fn by_modality(&self, modality: Modality) -> Vec<&WsiRecord> {
        self.records.iter().filter(|r| r.modality == modality).collect()
    }

    pub fn get(&self, wsi_id: &str) -> Option<&WsiRecord> {
        self.records.iter().find(|r| r.wsi_id == wsi_id)
    }
}

fn check_unique(records: &[WsiRecord]) -> Result<(), ManifestError> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.wsi_id.as_str()) {
            return Err(ManifestError::DuplicateId(r.wsi_id.clone()));
        }
    }
    Ok(())
}

/// Reads a manifest file, preserving row order.
pub fn load_manifest(path: &Path) -> Result<Vec<WsiRecord>, ManifestError> {
    if !path.is_file() {
        return Err(ManifestError::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<Vec<WsiRecord>, ManifestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());

    let mut records = Vec::new();
    let mut saw_header = false;
    for row in reader.records() {
        let row = row.map_err(|e| ManifestError::ParseError {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.iter().all(str::is_empty) {
            continue;
        }
        if !saw_header {
            if row.iter().ne(MANIFEST_HEADER) {
                return Err(ManifestError::ParseError {
                    line,
                    message: format!("expected header `{}`", MANIFEST_HEADER.join(",")),
                });
            }
            saw_header = true;
            continue;
        }
        if row.len() != MANIFEST_HEADER.len() {
            return Err(ManifestError::ParseError {
                line,
                message: format!("expected 4 fields, found {}", row.len()),
            });
        }
        if row[0].is_empty() || row[1].is_empty() {
            return Err(ManifestError::ParseError {
                line,
                message: "empty wsi_id or image_path".into(),
            });
        }
        records.push(WsiRecord {
            wsi_id: row[0].to_string(),
            image_path: PathBuf::from(&row[1]),
            modality: row[2].parse()?,
            label: row[3].parse()?,
        });
    }
    if !saw_header {
        return Err(ManifestError::ParseError {
            line: 1,
            message: "missing header".into(),
        });
    }
    check_unique(&records)?;
    Ok(records)
}

/// Serializes records in manifest format.
pub fn write_manifest(path: &Path, records: &[WsiRecord]) -> Result<(), ManifestError> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_io)?;
    writer.write_record(MANIFEST_HEADER).map_err(csv_io)?;
    for r in records {
        writer
            .write_record([
                r.wsi_id.as_str(),
                &r.image_path.to_string_lossy(),
                r.modality.as_str(),
                r.label.as_str(),
            ])
            .map_err(csv_io)?;
    }
    writer.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> ManifestError {
    ManifestError::Io(std::io::Error::other(e))
}

/// A train/test partition of slide ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub train_ratio: f64,
}

/// Number of training slides: `round(ratio * n)` with halves rounded up.
pub fn train_size(n: usize, train_ratio: f64) -> usize {
    (train_ratio * n as f64 + 0.5).floor() as usize
}

/// Uniform (unstratified) random split. The permutation is a Fisher-Yates
/// shuffle driven by ChaCha8 seeded with `seed`.
pub fn split_train_test(records: &[&WsiRecord], train_ratio: f64, seed: u64) -> Result<Split, ManifestError> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(ManifestError::InvalidRatio(train_ratio));
    }
    let n = records.len();
    let n_train = train_size(n, train_ratio);
    if n < 2 || n_train == 0 || n_train >= n {
        return Err(ManifestError::TooFewRecords { n, ratio: train_ratio });
    }
    let mut ids: Vec<String> = records.iter().map(|r| r.wsi_id.clone()).collect();
    ids.shuffle(&mut rng_from_seed(seed));
    let test = ids.split_off(n_train);
    Ok(Split {
        train: ids,
        test,
        seed,
        train_ratio,
    })
}
