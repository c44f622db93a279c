//! Bag-of-features classification of whole-slide images with slide-level
//! feature augmentation, plus the pieces needed to evaluate it end to end:
//! manifests, a synthetic corpus, patch sampling, descriptors, codebooks,
//! SVMs, translation losses and the repeated-split harness.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod bof;
pub mod features;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod manifest;
pub mod patches;
pub mod seed;
pub mod svm;
pub mod synth;

pub use augment::{AugMode, AugmentationPolicy};
pub use bof::{BofHistogram, Codebook};
pub use features::{FeatureStore, FeatureVector};
pub use harness::{Classifier, ExperimentConfig, GridSpec, Report, ResultRecord};
pub use manifest::{Label, Manifest, Modality, WsiRecord};
pub use svm::{Kernel, SvmModel};
