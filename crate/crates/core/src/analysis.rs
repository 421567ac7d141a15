//! Plot data for the classifier-magnitude, feature-similarity and weight-distribution studies.
//!
//! Nothing here feeds back into training or evaluation. The bounded-memory
//! chain at the bottom of this module is the only code path in the crate
//! that lets a state read past-class training data; it exists to contrast
//! feature drift with and without a small exemplar memory and keeps its own
//! access audit.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::datahub::{state_training_view, AccessAudit, IncrementalStream, LabeledFeatureSet, StateView};
use crate::engine::{train_chain_with_views, TrainingPlan};
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::neuralnet::Model;
use crate::normalize::{mean, population_std, standardize};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MagnitudeMode {
    Raw,
    Standardized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateMagnitude {
    pub state: usize,
    pub new_mean: f64,
    /// Absent when the state has no past classes.
    pub past_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeProfile {
    pub mode: MagnitudeMode,
    pub states: Vec<StateMagnitude>,
}

fn row_magnitude(row: &[f64], mode: MagnitudeMode) -> Result<f64> {
    let mean_abs = |r: &[f64]| r.iter().map(|v| v.abs()).sum::<f64>() / r.len() as f64;
    Ok(match mode {
        MagnitudeMode::Raw => mean_abs(row),
        MagnitudeMode::Standardized => mean_abs(&standardize(row)?),
    })
}

/// Mean over rows of the per-row mean |w|, for the new and past classes of state `t`.
pub fn state_magnitude(head: &Matrix, origin: &[usize], t: usize, mode: MagnitudeMode) -> Result<StateMagnitude> {
    if origin.len() < head.rows() {
        return Err(Error::shape(format!("origin for {} rows", head.rows()), origin.len()));
    }
    let mut new = (0.0, 0usize);
    let mut past = (0.0, 0usize);
    for (r, row) in head.iter_rows().enumerate() {
        let m = row_magnitude(row, mode).map_err(|e| match e {
            Error::Degenerate { reason, .. } => Error::Degenerate { class: Some(r), reason },
            other => other,
        })?;
        match origin[r].cmp(&t) {
            std::cmp::Ordering::Equal => {
                new.0 += m;
                new.1 += 1;
            }
            std::cmp::Ordering::Less => {
                past.0 += m;
                past.1 += 1;
            }
            std::cmp::Ordering::Greater => {}
        }
    }
    if new.1 == 0 {
        return Err(Error::Argument(format!("state {t} has no new-class rows")));
    }
    Ok(StateMagnitude {
        state: t,
        new_mean: new.0 / new.1 as f64,
        past_mean: (past.1 > 0).then(|| past.0 / past.1 as f64),
    })
}

/// Magnitude profile over a sequence of heads, `heads[t]` being the head of state `t`.
/// State 0 is skipped.
pub fn magnitude_profile(heads: &[&Matrix], origin: &[usize], mode: MagnitudeMode) -> Result<MagnitudeProfile> {
    if heads.len() < 2 {
        return Err(Error::Argument(
            "magnitude profile needs at least one incremental state".into(),
        ));
    }
    let states = heads
        .iter()
        .enumerate()
        .skip(1)
        .map(|(t, h)| state_magnitude(h, origin, t, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(MagnitudeProfile { mode, states })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityProfile {
    pub reference_state: usize,
    /// Mean cosine similarity to the reference features, indexed by state.
    pub per_state: Vec<f64>,
    /// Probe samples skipped because a feature vector had zero norm, per state.
    pub excluded: Vec<usize>,
}

fn same_architecture(a: &Model, b: &Model) -> bool {
    a.input_dim() == b.input_dim() && a.hidden_sizes() == b.hidden_sizes() && a.feature_dim() == b.feature_dim()
}

/// Mean cosine similarity between the features of `probe` under the
/// reference model and under every model of `checkpoints`.
pub fn feature_similarity(checkpoints: &[Model], reference_state: usize, probe: &Matrix) -> Result<SimilarityProfile> {
    let reference = checkpoints.get(reference_state).ok_or_else(|| {
        Error::Argument(format!(
            "reference state {reference_state} outside {} checkpoints",
            checkpoints.len()
        ))
    })?;
    if let Some(i) = checkpoints.iter().position(|m| !same_architecture(m, reference)) {
        return Err(Error::shape(
            "checkpoints sharing one architecture",
            format!("state {i} differs"),
        ));
    }
    let ref_features = reference.features(probe)?;
    let ref_norms: Vec<f64> = ref_features.iter_rows().map(|r| dot(r, r).sqrt()).collect();
    let mut per_state = Vec::with_capacity(checkpoints.len());
    let mut excluded = Vec::with_capacity(checkpoints.len());
    for (s, model) in checkpoints.iter().enumerate() {
        let features = if s == reference_state {
            ref_features.clone()
        } else {
            model.features(probe)?
        };
        let mut sum = 0.0;
        let mut used = 0usize;
        for (r, row) in features.iter_rows().enumerate() {
            let norm = dot(row, row).sqrt();
            if norm == 0.0 || ref_norms[r] == 0.0 {
                continue;
            }
            let cos = if s == reference_state {
                1.0
            } else {
                (dot(row, ref_features.row(r)) / (norm * ref_norms[r])).clamp(-1.0, 1.0)
            };
            sum += cos;
            used += 1;
        }
        let skipped = features.rows() - used;
        if skipped > 0 {
            log::warn!("state {s}: {skipped} probe samples with zero-norm features excluded");
        }
        if used == 0 {
            return Err(Error::Numeric(format!(
                "state {s}: every probe feature vector has zero norm"
            )));
        }
        per_state.push(sum / used as f64);
        excluded.push(skipped);
    }
    Ok(SimilarityProfile {
        reference_state,
        per_state,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowDistribution {
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub min: f64,
    pub max: f64,
    /// Equal-width bins over `[min, max]`.
    pub histogram: Vec<usize>,
}

pub const DEFAULT_BINS: usize = 20;

/// Moment estimates and a histogram per row. Skewness and kurtosis of a
/// constant row are reported as 0.
pub fn distribution_stats(matrix: &Matrix, bins: usize) -> Result<Vec<RowDistribution>> {
    if matrix.cols() < 8 {
        return Err(Error::Argument(format!(
            "distribution statistics need at least 8 dimensions, got {}",
            matrix.cols()
        )));
    }
    if bins == 0 {
        return Err(Error::Argument("histogram needs at least one bin".into()));
    }
    Ok(matrix.iter_rows().map(|row| row_distribution(row, bins)).collect())
}

fn row_distribution(row: &[f64], bins: usize) -> RowDistribution {
    let n = row.len() as f64;
    let m = mean(row);
    let sd = population_std(row);
    let (skewness, excess_kurtosis) = if sd > 0.0 {
        let m3 = row.iter().map(|v| (v - m).powi(3)).sum::<f64>() / n;
        let m4 = row.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n;
        (m3 / sd.powi(3), m4 / sd.powi(4) - 3.0)
    } else {
        (0.0, 0.0)
    };
    let min = row.iter().copied().fold(f64::INFINITY, f64::min);
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut histogram = vec![0usize; bins];
    let width = max - min;
    for &v in row {
        let b = if width > 0.0 {
            (((v - min) / width) * bins as f64).floor() as usize
        } else {
            0
        };
        histogram[b.min(bins - 1)] += 1;
    }
    RowDistribution {
        mean: m,
        std: sd,
        skewness,
        excess_kurtosis,
        min,
        max,
        histogram,
    }
}

/// Random exemplar memory holding a fixed share of the training set,
/// split evenly over the past classes.
#[derive(Debug, Clone)]
pub struct ExemplarMemory {
    capacity: usize,
    seed: u64,
}

impl ExemplarMemory {
    /// `fraction` of the whole training set, e.g. `0.01` for 1%.
    pub fn new(train_size: usize, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::Argument("memory fraction must lie in (0, 1)".into()));
        }
        Ok(Self {
            capacity: (train_size as f64 * fraction).round() as usize,
            seed,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Training view of state `t` augmented with exemplars of the past classes.
    fn view(
        &self,
        stream: &IncrementalStream,
        train: &LabeledFeatureSet,
        t: usize,
        audit: &mut AccessAudit,
    ) -> Result<StateView> {
        let mut view = state_training_view(stream, train, t, audit)?;
        let past_classes = t * stream.classes_per_state();
        if t == 0 || past_classes == 0 {
            return Ok(view);
        }
        let per_class = self.capacity / past_classes;
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &label) in train.labels().iter().enumerate() {
            if let Some(slot) = stream.slot_of(label) {
                if slot < past_classes {
                    by_class.entry(slot).or_default().push(i);
                }
            }
        }
        let mut rng = seed::rng(self.seed, "exemplar-memory", t as u64);
        let mut picked = Vec::new();
        for (slot, rows) in &by_class {
            let k = per_class.min(rows.len());
            for j in sample(&mut rng, rows.len(), k).into_iter() {
                picked.push(rows[j]);
                audit.record(stream.state_of_slot(*slot), t);
            }
        }
        picked.sort_unstable();
        let extra = train.features().select_rows(&picked);
        view.features.append_rows(&extra)?;
        view.targets.extend(
            picked
                .iter()
                .map(|&i| stream.slot_of(train.labels()[i]).expect("known label")),
        );
        view.sample_indices.extend(picked);
        Ok(view)
    }
}

/// Fine-tuning chain trained with an exemplar memory. Its reads are recorded
/// in `audit`, which is expected to show cross-state traffic.
pub fn train_chain_with_memory(
    train: &LabeledFeatureSet,
    stream: &IncrementalStream,
    plan: &TrainingPlan,
    memory: &ExemplarMemory,
    audit: &mut AccessAudit,
) -> Result<Vec<Model>> {
    train_chain_with_views(train.dim(), stream, plan, |t| memory.view(stream, train, t, audit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::DenseLayer;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn equal_rows_have_equal_group_means() {
        let head = Matrix::from_rows(&[[1.0, -2.0, 3.0]; 4]).unwrap();
        let m = state_magnitude(&head, &[0, 0, 1, 1], 1, MagnitudeMode::Raw).unwrap();
        assert_eq!(m.past_mean, Some(m.new_mean));
        assert_eq!(m.new_mean, 2.0);
    }

    #[test]
    fn profile_skips_state_zero_and_needs_increments() {
        let h0 = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let h1 = Matrix::from_rows(&[[1.0, 2.0], [0.5, 0.5]]).unwrap();
        assert!(magnitude_profile(&[&h0], &[0, 1], MagnitudeMode::Raw).is_err());
        let p = magnitude_profile(&[&h0, &h1], &[0, 1], MagnitudeMode::Raw).unwrap();
        assert_eq!(p.states.len(), 1);
        assert_eq!(p.states[0].past_mean, Some(1.5));
        assert_eq!(p.states[0].new_mean, 0.5);
    }

    #[test]
    fn standardized_rows_have_similar_magnitudes() {
        let mut rng = seed::rng(4, "test", 0);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| {
                let scale = 10f64.powi(i - 3);
                (0..2048)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        scale * z + i as f64
                    })
                    .collect()
            })
            .collect();
        let head = Matrix::from_rows(&rows).unwrap();
        let m = state_magnitude(&head, &[0, 0, 0, 1, 1, 1], 1, MagnitudeMode::Standardized).unwrap();
        assert!((m.new_mean / m.past_mean.unwrap() - 1.0).abs() < 0.05);
    }

    fn linear_model(head: Matrix) -> Model {
        let d = head.cols();
        let n = head.rows();
        Model::from_parts(
            d,
            vec![DenseLayer {
                weights: Matrix::identity(d),
                bias: vec![0.0; d],
            }],
            head,
            vec![0.0; n],
            0,
        )
        .unwrap()
    }

    #[test]
    fn self_similarity_is_one_and_orthogonal_is_zero() {
        let a = linear_model(Matrix::zeros(1, 2));
        // Second model swaps the coordinates, making features orthogonal for axis probes.
        let swap = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let b = Model::from_parts(
            2,
            vec![DenseLayer {
                weights: swap,
                bias: vec![0.0; 2],
            }],
            Matrix::zeros(1, 2),
            vec![0.0],
            0,
        )
        .unwrap();
        let probe = Matrix::from_rows(&[[1.0, 0.0], [0.0, 2.0]]).unwrap();
        let p = feature_similarity(&[a.clone(), b], 0, &probe).unwrap();
        assert_eq!(p.per_state[0], 1.0);
        assert!(p.per_state[1].abs() < 1e-15);
        let p = feature_similarity(&[a.clone(), a], 1, &probe).unwrap();
        assert!((p.per_state[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_features_are_excluded() {
        let a = linear_model(Matrix::zeros(1, 2));
        let probe = Matrix::from_rows(&[[1.0, 0.0], [-1.0, -1.0]]).unwrap();
        let p = feature_similarity(&[a.clone(), a], 0, &probe).unwrap();
        assert_eq!(p.excluded, vec![1, 1]);
        assert!(feature_similarity(&[linear_model(Matrix::zeros(1, 2))], 3, &probe).is_err());
    }

    #[test]
    fn normal_moments() {
        let mut rng = seed::rng(12, "normal-moments", 0);
        let row: Vec<f64> = (0..4096).map(|_| StandardNormal.sample(&mut rng)).collect();
        let stats = distribution_stats(&Matrix::from_rows(&[row]).unwrap(), DEFAULT_BINS).unwrap();
        assert!(stats[0].skewness.abs() < 0.15, "{}", stats[0].skewness);
        assert!(stats[0].excess_kurtosis.abs() < 0.3, "{}", stats[0].excess_kurtosis);
        assert_eq!(stats[0].histogram.iter().sum::<usize>(), 4096);
    }

    #[test]
    fn constant_and_two_point_rows() {
        let m = Matrix::from_rows(&[
            vec![2.0; 8],
            (0..8).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect(),
        ])
        .unwrap();
        let stats = distribution_stats(&m, 5).unwrap();
        assert_eq!(stats[0].std, 0.0);
        assert_eq!(stats[0].histogram, vec![8, 0, 0, 0, 0]);
        assert_eq!(stats[1].skewness, 0.0);
        assert!(distribution_stats(&Matrix::zeros(1, 7), 5).is_err());
    }

    #[test]
    fn standardized_row_stats() {
        let row: Vec<f64> = (0..64).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0).collect();
        let s = standardize(&row).unwrap();
        let stats = distribution_stats(&Matrix::from_rows(&[s]).unwrap(), 10).unwrap();
        assert!(stats[0].mean.abs() < 1e-10);
        assert!((stats[0].std - 1.0).abs() < 1e-10);
    }
}
