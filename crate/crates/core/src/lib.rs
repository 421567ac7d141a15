//! Memoryless class-incremental learning with standardized initial classifier weights.
//!
//! A small MLP is fine-tuned over a stream of class batches without keeping
//! any past data. After each state the new classes' classifier rows are
//! frozen in a [`WeightBank`]; at evaluation time those initial classifiers
//! are replayed, optionally standardized per row and calibrated by the ratio
//! of state-level mean top-1 scores.
//!
//! Module map:
//!
//! - [`datahub`]: datasets, synthetic clusters, class stream, access audit
//! - [`neuralnet`]: MLP, exact gradients, SGD training, checkpoints
//! - [`weightbank`]: frozen per-class initial classifiers and state means
//! - [`normalize`]: standardization, L2, min-max and mean normalization
//! - [`scoring`]: classifier assembly and prediction scores
//! - [`metrics`]: top-k, averaged incremental accuracy, G_IL, error typology
//! - [`analysis`]: magnitude, feature-similarity and weight-distribution data
//! - [`experiment`]: config-driven end-to-end runs and run directories

pub mod analysis;
pub mod datahub;
pub mod engine;
mod error;
pub mod experiment;
pub mod matrix;
pub mod metrics;
pub mod neuralnet;
pub mod normalize;
pub mod scoring;
pub mod seed;
pub mod weightbank;

pub use datahub::{AccessAudit, Corpus, IncrementalStream, LabeledFeatureSet, Split, StateView, SyntheticSpec};
pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, RunArtifacts};
pub use matrix::Matrix;
pub use metrics::{GilInput, MetricsReport, Typology};
pub use neuralnet::{Distillation, Model, TrainSpec};
pub use normalize::NormalizationKind;
pub use scoring::{Backbone, Calibration, ClassifierSource, EvalConfig, Method, ScoreMatrix};
pub use weightbank::WeightBank;
