//! Prediction scores from a chosen classifier source, normalization and calibration.
//!
//! For a class `i` first learned in state `j`, evaluated in state `t`:
//!
//! ```text
//! score(x, i) = (f_t(x) · S_j^i + b_j^i) × μ(M_t) / μ(M_j)
//! ```
//!
//! where `S_j^i` is the (optionally normalized) classifier row and the ratio
//! is applied only under `mc` calibration. Features always come from the
//! current model's extractor. Scores are raw affine outputs; no softmax.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{affine, Matrix};
use crate::neuralnet::{argmax, Model};
use crate::normalize::{self, NormalizationKind};
use crate::weightbank::WeightBank;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierSource {
    CurrentHead,
    InitialBank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    #[default]
    None,
    Mc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EvalConfig {
    pub source: ClassifierSource,
    pub normalization: NormalizationKind,
    pub calibration: Calibration,
}

impl EvalConfig {
    pub const fn new(source: ClassifierSource, normalization: NormalizationKind, calibration: Calibration) -> Self {
        Self {
            source,
            normalization,
            calibration,
        }
    }

    /// Plain scoring with the live head.
    pub const VANILLA: EvalConfig = EvalConfig::new(
        ClassifierSource::CurrentHead,
        NormalizationKind::None,
        Calibration::None,
    );

    /// Normalizing the live head is allowed but is not one of the named methods.
    pub fn is_standard_method(&self) -> bool {
        self.source == ClassifierSource::InitialBank || self.normalization == NormalizationKind::None
    }
}

/// Training chain a method is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Ft,
    Lwf,
}

impl Backbone {
    pub fn as_str(self) -> &'static str {
        match self {
            Backbone::Ft => "ft",
            Backbone::Lwf => "lwf",
        }
    }
}

/// A named grid entry such as `FT`, `inFT_siw^mc` or `inLwF_L2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Method {
    pub backbone: Backbone,
    pub eval: EvalConfig,
}

impl Method {
    pub const fn new(backbone: Backbone, eval: EvalConfig) -> Self {
        Self { backbone, eval }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.eval.source == ClassifierSource::InitialBank {
            f.write_str("in")?;
        }
        f.write_str(match self.backbone {
            Backbone::Ft => "FT",
            Backbone::Lwf => "LwF",
        })?;
        if let Some(s) = self.eval.normalization.suffix() {
            write!(f, "_{s}")?;
        }
        if self.eval.calibration == Calibration::Mc {
            f.write_str("^mc")?;
        }
        Ok(())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown method name {s:?}"));
        let (rest, calibration) = if let Some(r) = s.strip_suffix("^mc").or_else(|| s.strip_suffix("_mc")) {
            (r, Calibration::Mc)
        } else {
            (s, Calibration::None)
        };
        let (base, norm) = match rest.split_once('_') {
            Some((b, n)) => (b, n.parse::<NormalizationKind>().map_err(|_| bad())?),
            None => (rest, NormalizationKind::None),
        };
        if norm == NormalizationKind::None && rest.contains('_') {
            return Err(bad());
        }
        let (source, backbone) = match base {
            "FT" => (ClassifierSource::CurrentHead, Backbone::Ft),
            "inFT" => (ClassifierSource::InitialBank, Backbone::Ft),
            "LwF" => (ClassifierSource::CurrentHead, Backbone::Lwf),
            "inLwF" => (ClassifierSource::InitialBank, Backbone::Lwf),
            _ => return Err(bad()),
        };
        Ok(Method::new(backbone, EvalConfig::new(source, norm, calibration)))
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Classifier ready to score features of the state-`t` model.
#[derive(Debug, Clone, PartialEq)]
pub struct BuiltClassifier {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    /// Per-class multiplier; all ones without calibration.
    pub ratios: Vec<f64>,
    pub warnings: Vec<String>,
}

fn require_bank<'a>(bank: Option<&'a WeightBank>, why: &str) -> Result<&'a WeightBank> {
    bank.ok_or_else(|| Error::BankIncomplete(format!("{why} needs a weight bank")))
}

pub fn build_classifier(
    config: &EvalConfig,
    model: &Model,
    bank: Option<&WeightBank>,
    t: usize,
) -> Result<BuiltClassifier> {
    let (source_weights, bias, origin) = match config.source {
        ClassifierSource::CurrentHead => {
            let origin = match config.calibration {
                Calibration::None => None,
                Calibration::Mc => Some(require_bank(bank, "mc calibration")?.assemble_initial_matrix(t)?.origin),
            };
            (model.head_weights().clone(), model.head_bias().to_vec(), origin)
        }
        ClassifierSource::InitialBank => {
            let init = require_bank(bank, "initial classifiers")?.assemble_initial_matrix(t)?;
            (init.weights, init.bias, Some(init.origin))
        }
    };
    if source_weights.cols() != model.feature_dim() {
        return Err(Error::shape(
            format!("{}-dimensional classifiers", model.feature_dim()),
            source_weights.cols(),
        ));
    }
    if source_weights.rows() != model.num_classes() {
        return Err(Error::shape(
            format!("{} classes in state {t}", model.num_classes()),
            format!("{} classifier rows", source_weights.rows()),
        ));
    }
    if let Some(origin) = &origin {
        if origin.len() != source_weights.rows() {
            return Err(Error::shape(
                format!("{} origin entries", source_weights.rows()),
                origin.len(),
            ));
        }
    }

    let weights = normalize::apply(config.normalization, &source_weights)?;
    let mut warnings = Vec::new();
    let ratios = match (config.calibration, origin) {
        (Calibration::Mc, Some(origin)) => {
            let bank = require_bank(bank, "mc calibration")?;
            let current = bank
                .state_mean(t)
                .ok_or_else(|| Error::BankIncomplete(format!("no state mean for state {t}")))?;
            let mut ratios = Vec::with_capacity(origin.len());
            let mut warned = vec![false; t + 1];
            for &j in &origin {
                let past = bank
                    .state_mean(j)
                    .ok_or_else(|| Error::BankIncomplete(format!("no state mean for state {j}")))?;
                if current > 0.0 && past > 0.0 {
                    ratios.push(current / past);
                } else {
                    if !warned[j] {
                        warned[j] = true;
                        let msg = format!(
                            "non-positive state mean (state {t}: {current}, state {j}: {past}); mc ratio for origin state {j} set to 1"
                        );
                        log::warn!("{msg}");
                        warnings.push(msg);
                    }
                    ratios.push(1.0);
                }
            }
            ratios
        }
        _ => vec![1.0; weights.rows()],
    };
    Ok(BuiltClassifier {
        weights,
        bias,
        ratios,
        warnings,
    })
}

/// Samples × classes table of raw scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    scores: Matrix,
}

impl ScoreMatrix {
    pub fn new(scores: Matrix) -> Result<Self> {
        if !scores.is_finite() {
            return Err(Error::Numeric("non-finite score".into()));
        }
        Ok(Self { scores })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.scores
    }

    pub fn num_samples(&self) -> usize {
        self.scores.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.scores.cols()
    }

    /// Top-1 class per sample; the lowest class id wins ties.
    pub fn argmax(&self) -> Vec<usize> {
        self.scores.iter_rows().map(argmax).collect()
    }

    /// The `k` best classes of one sample, best first, ties by class id.
    pub fn top_k(&self, sample: usize, k: usize) -> Vec<usize> {
        let row = self.scores.row(sample);
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }
}

pub fn apply_classifier(classifier: &BuiltClassifier, features: &Matrix) -> Result<ScoreMatrix> {
    let mut scores = affine(features, &classifier.weights, &classifier.bias)?;
    if classifier.ratios.iter().any(|&r| r != 1.0) {
        for r in 0..scores.rows() {
            for (s, ratio) in scores.row_mut(r).iter_mut().zip(&classifier.ratios) {
                *s *= ratio;
            }
        }
    }
    ScoreMatrix::new(scores)
}

pub fn score(
    config: &EvalConfig,
    model: &Model,
    bank: Option<&WeightBank>,
    t: usize,
    batch: &Matrix,
) -> Result<ScoreMatrix> {
    let classifier = build_classifier(config, model, bank, t)?;
    apply_classifier(&classifier, &model.features(batch)?)
}
