//! Frozen initial classifiers.
//!
//! When a state finishes training, the head rows and biases of its new classes
//! are copied into the bank together with `μ(M_t)`, the mean top-1 logit of
//! the just-trained model over that state's training samples. Entries are
//! append-only: later fine-tuning can change the live head but never the bank.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::datahub::{ByteReader, StateView};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::neuralnet::Model;

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub origin_state: usize,
}

/// Initial classifier matrix with one row per seen class, in slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialClassifier {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    /// Origin state of each row.
    pub origin: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightBank {
    feature_dim: usize,
    // Index is the class slot.
    entries: Vec<BankEntry>,
    state_means: Vec<f64>,
}

impl WeightBank {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            entries: Vec::new(),
            state_means: Vec::new(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn entry(&self, slot: usize) -> Option<&BankEntry> {
        self.entries.get(slot)
    }

    pub fn state_means(&self) -> &[f64] {
        &self.state_means
    }

    pub fn state_mean(&self, state: usize) -> Option<f64> {
        self.state_means.get(state).copied()
    }

    /// Number of completed states.
    pub fn recorded_states(&self) -> usize {
        self.state_means.len()
    }

    /// Freezes the classes of `view.state` from `model`.
    ///
    /// The new classes are the distinct targets of the view; they must be the
    /// next unrecorded slots.
    pub fn record_state(&mut self, model: &Model, view: &StateView) -> Result<()> {
        if model.feature_dim() != self.feature_dim {
            return Err(Error::shape(
                format!("{}-dimensional classifiers", self.feature_dim),
                model.feature_dim(),
            ));
        }
        if view.is_empty() {
            return Err(Error::Argument(format!("state {} view is empty", view.state)));
        }
        let mut new_slots: Vec<usize> = view.targets.clone();
        new_slots.sort_unstable();
        new_slots.dedup();
        if let Some(&slot) = new_slots.iter().find(|&&s| s < self.entries.len()) {
            return Err(Error::Immutable(slot));
        }
        if view.state < self.state_means.len() {
            return Err(Error::Argument(format!("state {} is already recorded", view.state)));
        }
        if view.state > self.state_means.len() {
            return Err(Error::BankIncomplete(format!(
                "cannot record state {} before state {}",
                view.state,
                self.state_means.len()
            )));
        }
        let expected: Vec<usize> = (self.entries.len()..self.entries.len() + new_slots.len()).collect();
        if new_slots != expected {
            return Err(Error::BankIncomplete(format!(
                "state {} classes must occupy slots {:?}, found {:?}",
                view.state, expected, new_slots
            )));
        }
        if model.num_classes() < self.entries.len() + new_slots.len() {
            return Err(Error::shape(
                format!("at least {} head rows", self.entries.len() + new_slots.len()),
                model.num_classes(),
            ));
        }

        let logits = model.forward(&view.features)?.logits;
        let mu = logits
            .iter_rows()
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            / logits.rows() as f64;

        for &slot in &new_slots {
            self.entries.push(BankEntry {
                weights: model.head_weights().row(slot).to_vec(),
                bias: model.head_bias()[slot],
                origin_state: view.state,
            });
        }
        self.state_means.push(mu);
        Ok(())
    }

    /// The initial classifier matrix `W_t^in` for all classes seen up to state `t`.
    pub fn assemble_initial_matrix(&self, t: usize) -> Result<InitialClassifier> {
        if t >= self.state_means.len() {
            return Err(Error::BankIncomplete(format!(
                "state {t} requested but only {} states are recorded",
                self.state_means.len()
            )));
        }
        let rows: Vec<&BankEntry> = self.entries.iter().take_while(|e| e.origin_state <= t).collect();
        let mut data = Vec::with_capacity(rows.len() * self.feature_dim);
        for e in &rows {
            data.extend_from_slice(&e.weights);
        }
        Ok(InitialClassifier {
            weights: Matrix::new(rows.len(), self.feature_dim, data)?,
            bias: rows.iter().map(|e| e.bias).collect(),
            origin: rows.iter().map(|e| e.origin_state).collect(),
        })
    }

    fn hash_through(&self, last_state: Option<usize>) -> String {
        let keep = |origin: usize| last_state.is_none_or(|s| origin <= s);
        let mut h = Sha256::new();
        h.update((self.feature_dim as u64).to_le_bytes());
        for (slot, e) in self.entries.iter().enumerate().filter(|(_, e)| keep(e.origin_state)) {
            h.update((slot as u64).to_le_bytes());
            h.update((e.origin_state as u64).to_le_bytes());
            h.update(e.bias.to_le_bytes());
            for w in &e.weights {
                h.update(w.to_le_bytes());
            }
        }
        for (state, mu) in self.state_means.iter().enumerate().filter(|(s, _)| keep(*s)) {
            h.update((state as u64).to_le_bytes());
            h.update(mu.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 over every entry and state mean.
    pub fn content_digest(&self) -> String {
        self.hash_through(None)
    }

    /// SHA-256 over the entries and means recorded for states `0..=state`.
    pub fn digest_through(&self, state: usize) -> String {
        self.hash_through(Some(state))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&BANK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.feature_dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.origin_state as u64).to_le_bytes());
            out.extend_from_slice(&e.bias.to_le_bytes());
            for w in &e.weights {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.state_means.len() as u64).to_le_bytes());
        for mu in &self.state_means {
            out.extend_from_slice(&mu.to_le_bytes());
        }
        out.extend_from_slice(&hex::decode(self.content_digest()).expect("hex digest"));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != BANK_MAGIC {
            return Err(Error::Format("not a weight bank file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != BANK_VERSION {
            return Err(Error::Format(format!("unsupported bank version {version}")));
        }
        let feature_dim = r.len()?;
        let n = r.len()?;
        let mut entries = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let origin_state = r.len()?;
            let bias = r.f64()?;
            let weights = r.f64_vec(feature_dim)?;
            entries.push(BankEntry {
                weights,
                bias,
                origin_state,
            });
        }
        let states = r.len()?;
        let state_means = r.f64_vec(states)?;
        let stored = hex::encode(r.take(32)?);
        if r.remaining() != 0 {
            return Err(Error::Format("trailing bytes in bank file".into()));
        }
        let bank = Self {
            feature_dim,
            entries,
            state_means,
        };
        if bank.content_digest() != stored {
            return Err(Error::Integrity("weight bank digest mismatch".into()));
        }
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

const BANK_MAGIC: &[u8; 4] = b"SIWB";
const BANK_VERSION: u32 = 1;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::extend_head;

    fn view(state: usize, features: Matrix, targets: Vec<usize>) -> StateView {
        let n = targets.len();
        StateView {
            state,
            features,
            targets,
            sample_indices: (0..n).collect(),
        }
    }

    #[test]
    fn mean_of_single_sample() {
        let head = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let model = Model::from_parts(2, vec![], head, vec![0.0], 0).unwrap();
        let mut bank = WeightBank::new(2);
        bank.record_state(&model, &view(0, Matrix::from_rows(&[[3.2, -1.0]]).unwrap(), vec![0]))
            .unwrap();
        assert_eq!(bank.state_mean(0), Some(3.2));
    }

    #[test]
    fn record_then_rerecord_is_rejected() {
        let model = Model::new(3, &[4], 2, 0).unwrap();
        let v = view(
            0,
            Matrix::from_rows(&[[1.0, 0.0, 0.5], [0.0, 1.0, 0.2]]).unwrap(),
            vec![0, 1],
        );
        let mut bank = WeightBank::new(4);
        bank.record_state(&model, &v).unwrap();
        assert_eq!(bank.entries().len(), 2);
        assert!(bank.entries().iter().all(|e| e.origin_state == 0));
        assert!(matches!(bank.record_state(&model, &v), Err(Error::Immutable(0))));
    }

    #[test]
    fn state_zero_matrix_equals_head() {
        let model = Model::new(3, &[4], 2, 0).unwrap();
        let v = view(
            0,
            Matrix::from_rows(&[[1.0, 0.0, 0.5], [0.0, 1.0, 0.2]]).unwrap(),
            vec![0, 1],
        );
        let mut bank = WeightBank::new(4);
        bank.record_state(&model, &v).unwrap();
        let init = bank.assemble_initial_matrix(0).unwrap();
        assert_eq!(&init.weights, model.head_weights());
        assert_eq!(init.bias, model.head_bias());
        assert!(matches!(bank.assemble_initial_matrix(1), Err(Error::BankIncomplete(_))));
    }

    #[test]
    fn drifted_head_does_not_leak_into_bank() {
        let model = Model::new(3, &[4], 2, 0).unwrap();
        let mut bank = WeightBank::new(4);
        let x = Matrix::from_rows(&[[1.0, 0.0, 0.5], [0.0, 1.0, 0.2]]).unwrap();
        bank.record_state(&model, &view(0, x.clone(), vec![0, 1])).unwrap();
        let d0 = bank.digest_through(0);
        let mut next = extend_head(&model, 2, 5).unwrap();
        for v in next.head_weights_mut().row_mut(0) {
            *v += 10.0;
        }
        bank.record_state(&next, &view(1, x, vec![2, 3])).unwrap();
        let init = bank.assemble_initial_matrix(1).unwrap();
        assert_eq!(init.weights.row(0), model.head_weights().row(0));
        assert_ne!(init.weights.row(0), next.head_weights().row(0));
        assert_eq!(init.weights.row(3), next.head_weights().row(3));
        assert_eq!(init.origin, vec![0, 0, 1, 1]);
        assert_eq!(bank.digest_through(0), d0);
        assert_ne!(bank.content_digest(), d0);
    }

    #[test]
    fn file_round_trip_and_tamper() {
        let model = Model::new(3, &[4], 2, 0).unwrap();
        let mut bank = WeightBank::new(4);
        bank.record_state(
            &model,
            &view(
                0,
                Matrix::from_rows(&[[1.0, 0.0, 0.5], [0.0, 1.0, 0.2]]).unwrap(),
                vec![0, 1],
            ),
        )
        .unwrap();
        let bytes = bank.to_bytes();
        assert_eq!(WeightBank::from_bytes(&bytes).unwrap(), bank);
        let mut bad = bytes;
        bad[40] ^= 0x10;
        assert!(matches!(WeightBank::from_bytes(&bad), Err(Error::Integrity(_))));
    }
}
