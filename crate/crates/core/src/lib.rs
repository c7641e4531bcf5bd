//! Generic patch-based image classification pipeline applied to face
//! recognition: dense patches, contrast normalization and ZCA whitening,
//! an unsupervised dictionary, a per-patch encoder, spatial pyramid pooling,
//! and a closed-form ridge regression classifier.
//!
//! The [`harness`] module wires these stages into reproducible experiments.

pub mod classifier;
pub mod dataio;
pub mod dictionary;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod lbp;
mod linalg;
pub mod pooling;
pub mod preprocess;

pub use error::{Error, Result};

pub use classifier::{LabelMatrix, ResidualModel, RidgeClassifier};
pub use dataio::{DatasetManifest, GrayImage, SplitSpec, TestCount};
pub use dictionary::{Dictionary, DictionaryMethod};
pub use encoders::{CodeMap, Encoder};
pub use pooling::{FeatureVector, PoolMode, PyramidSpec};
pub use preprocess::{PatchSet, WhiteningModel};
