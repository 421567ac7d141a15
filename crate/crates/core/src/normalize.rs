//! Per-classifier weight normalizations.
//!
//! Every function works on one classifier row at a time; statistics are never
//! shared across classes. Biases are not touched here.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationKind {
    #[default]
    None,
    Standardize,
    L2,
    MinMax,
    Mean,
}

impl NormalizationKind {
    pub const ALL: [NormalizationKind; 5] = [
        NormalizationKind::None,
        NormalizationKind::Standardize,
        NormalizationKind::L2,
        NormalizationKind::MinMax,
        NormalizationKind::Mean,
    ];

    /// Method-name suffix, e.g. `siw` in `inFT_siw`.
    pub fn suffix(self) -> Option<&'static str> {
        match self {
            NormalizationKind::None => None,
            NormalizationKind::Standardize => Some("siw"),
            NormalizationKind::L2 => Some("L2"),
            NormalizationKind::MinMax => Some("min-max"),
            NormalizationKind::Mean => Some("mean"),
        }
    }

    pub fn normalize(self, w: &[f64]) -> Result<Vec<f64>> {
        match self {
            NormalizationKind::None => Ok(w.to_vec()),
            NormalizationKind::Standardize => standardize(w),
            NormalizationKind::L2 => l2_normalize(w),
            NormalizationKind::MinMax => min_max_normalize(w),
            NormalizationKind::Mean => mean_normalize(w),
        }
    }
}

impl fmt::Display for NormalizationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormalizationKind::None => "none",
            NormalizationKind::Standardize => "standardize",
            NormalizationKind::L2 => "l2",
            NormalizationKind::MinMax => "min_max",
            NormalizationKind::Mean => "mean",
        })
    }
}

impl FromStr for NormalizationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(NormalizationKind::None),
            "standardize" | "siw" => Ok(NormalizationKind::Standardize),
            "l2" => Ok(NormalizationKind::L2),
            "min_max" | "min-max" | "minmax" => Ok(NormalizationKind::MinMax),
            "mean" => Ok(NormalizationKind::Mean),
            other => Err(Error::Config(format!("unknown normalization {other:?}"))),
        }
    }
}

pub fn mean(w: &[f64]) -> f64 {
    w.iter().sum::<f64>() / w.len() as f64
}

/// Population standard deviation (divides by `n`).
pub fn population_std(w: &[f64]) -> f64 {
    let m = mean(w);
    (w.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / w.len() as f64).sqrt()
}

fn range(w: &[f64]) -> (f64, f64) {
    w.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

fn non_empty(w: &[f64]) -> Result<()> {
    if w.is_empty() {
        return Err(Error::degenerate("empty classifier vector"));
    }
    Ok(())
}

/// `s_k = (w_k − μ(w)) / σ(w)` with population statistics.
pub fn standardize(w: &[f64]) -> Result<Vec<f64>> {
    if w.len() < 2 {
        return Err(Error::degenerate("standardization needs at least two dimensions"));
    }
    let m = mean(w);
    let sd = population_std(w);
    if sd == 0.0 || !sd.is_finite() {
        return Err(Error::degenerate("zero variance, cannot standardize"));
    }
    Ok(w.iter().map(|v| (v - m) / sd).collect())
}

pub fn l2_normalize(w: &[f64]) -> Result<Vec<f64>> {
    non_empty(w)?;
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::degenerate("zero vector has no direction"));
    }
    Ok(w.iter().map(|v| v / norm).collect())
}

/// `s_k = (w_k − min) / (max − min)`.
pub fn min_max_normalize(w: &[f64]) -> Result<Vec<f64>> {
    non_empty(w)?;
    let (lo, hi) = range(w);
    if hi <= lo {
        return Err(Error::degenerate("constant vector has no range"));
    }
    Ok(w.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

/// `s_k = (w_k − μ(w)) / (max − min)`.
pub fn mean_normalize(w: &[f64]) -> Result<Vec<f64>> {
    non_empty(w)?;
    let (lo, hi) = range(w);
    if hi <= lo {
        return Err(Error::degenerate("constant vector has no range"));
    }
    let m = mean(w);
    Ok(w.iter().map(|v| (v - m) / (hi - lo)).collect())
}

/// Applies `kind` to every row independently. Errors name the offending row.
pub fn apply(kind: NormalizationKind, matrix: &Matrix) -> Result<Matrix> {
    if kind == NormalizationKind::None {
        return Ok(matrix.clone());
    }
    let mut out = Vec::with_capacity(matrix.rows() * matrix.cols());
    for (i, row) in matrix.iter_rows().enumerate() {
        let normalized = kind.normalize(row).map_err(|e| match e {
            Error::Degenerate { reason, .. } => Error::Degenerate { class: Some(i), reason },
            other => other,
        })?;
        out.extend(normalized);
    }
    Matrix::new(matrix.rows(), matrix.cols(), out)
}
