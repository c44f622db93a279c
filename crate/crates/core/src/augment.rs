//! Slide-level feature augmentation: several histograms per slide, each
//! built from a random subset of its patches.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bof::{assign_all, histogram_from_assignments, BofError, BofHistogram, Codebook};
use crate::features::FeatureVector;
use crate::seed::{derive_seed, rng_from_seed};

pub const DEFAULT_REPEATS: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("invalid augmentation policy: {0}")]
    InvalidPolicy(String),
    #[error(transparent)]
    Bof(#[from] BofError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugMode {
    None,
    Aug1,
    Aug2,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub mode: AugMode,
    pub repeats: usize,
    pub r_patch: f64,
}

impl AugmentationPolicy {
    pub const NONE: Self = Self {
        mode: AugMode::None,
        repeats: 1,
        r_patch: 1.0,
    };
    /// 8 histograms from 75 % of the patches.
    pub const AUG1: Self = Self {
        mode: AugMode::Aug1,
        repeats: DEFAULT_REPEATS,
        r_patch: 0.75,
    };
    /// 8 histograms from 50 % of the patches.
    pub const AUG2: Self = Self {
        mode: AugMode::Aug2,
        repeats: DEFAULT_REPEATS,
        r_patch: 0.5,
    };
    pub const GRID: [Self; 3] = [Self::NONE, Self::AUG1, Self::AUG2];

    pub fn custom(r_patch: f64, repeats: usize) -> Result<Self, AugmentError> {
        let p = Self {
            mode: AugMode::Custom,
            repeats,
            r_patch,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let expected = match self.mode {
            AugMode::None => Some((1, 1.0)),
            AugMode::Aug1 => Some((self.repeats, 0.75)),
            AugMode::Aug2 => Some((self.repeats, 0.5)),
            AugMode::Custom => None,
        };
        if let Some((repeats, r)) = expected {
            if self.repeats != repeats || self.r_patch != r {
                return Err(AugmentError::InvalidPolicy(format!(
                    "{} requires repeats = {repeats}, r_patch = {r}",
                    self
                )));
            }
        }
        if self.repeats == 0 || !(self.r_patch > 0.0 && self.r_patch <= 1.0) {
            return Err(AugmentError::InvalidPolicy(format!(
                "repeats = {}, r_patch = {}",
                self.repeats, self.r_patch
            )));
        }
        Ok(())
    }

    /// Histograms produced per training slide.
    pub fn expected_multiplicity(&self) -> usize {
        self.repeats
    }

    /// Patches drawn per histogram from a slide with `n` patches.
    pub fn subset_size(&self, n: usize) -> usize {
        ((self.r_patch * n as f64).floor() as usize).clamp(1, n.max(1))
    }
}

impl fmt::Display for AugmentationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode {
            AugMode::None => f.write_str("none"),
            AugMode::Aug1 => f.write_str("aug1"),
            AugMode::Aug2 => f.write_str("aug2"),
            AugMode::Custom => write!(f, "custom(r={},x{})", self.r_patch, self.repeats),
        }
    }
}

impl FromStr for AugmentationPolicy {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Self::NONE),
            "aug1" => Ok(Self::AUG1),
            "aug2" => Ok(Self::AUG2),
            other => Err(AugmentError::InvalidPolicy(format!("unknown policy `{other}`"))),
        }
    }
}

/// Builds `policy.repeats` histograms, each from ⌊r_patch·N⌋ patches drawn
/// without replacement. `None` returns the single full-set histogram.
pub fn augmented_histograms(
    codebook: &Codebook,
    features: &[FeatureVector],
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<Vec<BofHistogram>, AugmentError> {
    policy.validate()?;
    let assignments = assign_all(codebook, features)?;
    Ok(augment_assignments(
        &features[0].wsi_id,
        codebook.k,
        &assignments,
        policy,
        seed,
    ))
}

/// Same as [`augmented_histograms`] on precomputed centroid assignments.
pub fn augment_assignments(
    wsi_id: &str,
    k: usize,
    assignments: &[usize],
    policy: &AugmentationPolicy,
    seed: u64,
) -> Vec<BofHistogram> {
    if policy.mode == AugMode::None {
        return vec![histogram_from_assignments(wsi_id, k, assignments)];
    }
    let n = assignments.len();
    let m = policy.subset_size(n);
    (0..policy.repeats)
        .map(|round| {
            let mut rng = rng_from_seed(derive_seed(seed, &[round as u64]));
            let picked: Vec<usize> = sample(&mut rng, n, m).into_iter().map(|i| assignments[i]).collect();
            histogram_from_assignments(wsi_id, k, &picked)
        })
        .collect()
}

/// Indices drawn in one augmentation round; exposed for auditing.
pub fn round_indices(n: usize, policy: &AugmentationPolicy, seed: u64, round: usize) -> Vec<usize> {
    let mut rng = rng_from_seed(derive_seed(seed, &[round as u64]));
    sample(&mut rng, n, policy.subset_size(n)).into_vec()
}
