//! Feature datasets, the class-incremental stream and the memoryless access audit.
//!
//! Datasets are ingested as precomputed feature vectors with integer class
//! labels. An [`IncrementalStream`] shuffles the class ids with a seed and
//! cuts them into `T` equally sized blocks, one per state. Training code only
//! ever sees a state's data through [`state_training_view`], which records
//! every read in an [`AccessAudit`].
//!
//! Classes are addressed in two ways: by their dataset *label* and by their
//! *slot*, the position of the class in the stream's class order. Classifier
//! heads and the weight bank are indexed by slot, so the classes of state `t`
//! always occupy slots `t * n .. (t + 1) * n`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Feature vectors with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatureSet {
    features: Matrix,
    labels: Vec<usize>,
    split: Split,
}

impl LabeledFeatureSet {
    pub fn new(features: Matrix, labels: Vec<usize>, split: Split) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(
                format!("{} labels", features.rows()),
                format!("{} labels", labels.len()),
            ));
        }
        if features.rows() == 0 {
            return Err(Error::Argument("dataset has no samples".into()));
        }
        if features.cols() == 0 {
            return Err(Error::Argument("feature dimensionality must be at least 1".into()));
        }
        if let Some(pos) = features.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!(
                "non-finite feature value at row {}, column {}",
                pos / features.cols(),
                pos % features.cols()
            )));
        }
        Ok(Self {
            features,
            labels,
            split,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<usize> {
        self.labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.classes().len()
    }
}

/// A train/test pair sharing one label space.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: LabeledFeatureSet,
    pub test: LabeledFeatureSet,
}

impl Corpus {
    pub fn new(train: LabeledFeatureSet, test: LabeledFeatureSet) -> Result<Self> {
        if train.split != Split::Train || test.split != Split::Test {
            return Err(Error::Argument("corpus expects a train set and a test set".into()));
        }
        if train.dim() != test.dim() {
            return Err(Error::shape(format!("test dimensionality {}", train.dim()), test.dim()));
        }
        let known: BTreeSet<_> = train.labels.iter().copied().collect();
        if let Some(missing) = test.labels.iter().find(|l| !known.contains(l)) {
            return Err(Error::Argument(format!(
                "test label {missing} does not appear in the training set"
            )));
        }
        Ok(Self { train, test })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Packed,
}

impl DataFormat {
    /// `.csv` is CSV, everything else is the packed binary format.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DataFormat::Csv,
            _ => DataFormat::Packed,
        }
    }
}

const PACKED_MAGIC: &[u8; 4] = b"SIWF";
const PACKED_VERSION: u32 = 1;

pub fn load_dataset(path: &Path, format: DataFormat, split: Split) -> Result<LabeledFeatureSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::Load {
            line: 0,
            message: format!("{} is empty", path.display()),
        });
    }
    match format {
        DataFormat::Csv => parse_csv(&bytes, split),
        DataFormat::Packed => decode_packed(&bytes, split),
    }
}

pub fn save_dataset(set: &LabeledFeatureSet, path: &Path, format: DataFormat) -> Result<()> {
    let bytes = match format {
        DataFormat::Csv => encode_csv(set)?,
        DataFormat::Packed => encode_packed(set),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_csv(bytes: &[u8], split: Split) -> Result<LabeledFeatureSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let header = reader
        .headers()
        .map_err(|e| Error::Load {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let width = header.len();
    if width < 2 {
        return Err(Error::Load {
            line: 1,
            message: "header needs at least one feature column and a label column".into(),
        });
    }
    for (k, name) in header.iter().take(width - 1).enumerate() {
        if name != format!("f{k}") {
            return Err(Error::Load {
                line: 1,
                message: format!("expected header column f{k}, found {name:?}"),
            });
        }
    }
    if &header[width - 1] != "label" {
        return Err(Error::Load {
            line: 1,
            message: format!("last header column must be \"label\", found {:?}", &header[width - 1]),
        });
    }

    let d = width - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Load {
            line,
            message: e.to_string(),
        })?;
        if record.len() != width {
            return Err(Error::Load {
                line,
                message: format!("expected {width} columns, found {}", record.len()),
            });
        }
        for (k, field) in record.iter().take(d).enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Load {
                line,
                message: format!("column f{k}: {field:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Load {
                    line,
                    message: format!("column f{k}: non-finite value"),
                });
            }
            data.push(v);
        }
        let label: usize = record[d].parse().map_err(|_| Error::Load {
            line,
            message: format!("label {:?} is not a non-negative integer", &record[d]),
        })?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Load {
            line: 1,
            message: "no data rows".into(),
        });
    }
    let features = Matrix::new(labels.len(), d, data)?;
    LabeledFeatureSet::new(features, labels, split)
}

fn encode_csv(set: &LabeledFeatureSet) -> Result<Vec<u8>> {
    let mut out = BufWriter::new(Vec::new());
    let header: Vec<String> = (0..set.dim())
        .map(|k| format!("f{k}"))
        .chain(std::iter::once("label".to_string()))
        .collect();
    writeln!(out, "{}", header.join(",")).expect("write to Vec");
    for (row, label) in set.features.iter_rows().zip(&set.labels) {
        for v in row {
            // `{:?}` prints the shortest representation that round-trips exactly.
            write!(out, "{v:?},").expect("write to Vec");
        }
        writeln!(out, "{label}").expect("write to Vec");
    }
    out.into_inner().map_err(|e| Error::Format(format!("csv buffer: {e}")))
}

fn encode_packed(set: &LabeledFeatureSet) -> Vec<u8> {
    let n = set.len();
    let d = set.dim();
    let mut out = Vec::with_capacity(24 + 8 * n * (d + 1));
    out.extend_from_slice(PACKED_MAGIC);
    out.extend_from_slice(&PACKED_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    for v in set.features.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &set.labels {
        out.extend_from_slice(&(l as u64).to_le_bytes());
    }
    out
}

fn decode_packed(bytes: &[u8], split: Split) -> Result<LabeledFeatureSet> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != PACKED_MAGIC {
        return Err(Error::Format("not a packed feature file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != PACKED_VERSION {
        return Err(Error::Format(format!("unsupported packed version {version}")));
    }
    let n = r.len()?;
    let d = r.len()?;
    let expected = n
        .checked_mul(d + 1)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| Error::Format("packed header sizes overflow".into()))?;
    if r.remaining() != expected {
        return Err(Error::Format(format!(
            "packed payload is {} bytes, header implies {expected}",
            r.remaining()
        )));
    }
    let data = r.f64_vec(n * d)?;
    let labels = r
        .u64_vec(n)?
        .into_iter()
        .map(|l| usize::try_from(l).map_err(|_| Error::Format(format!("label {l} too large"))))
        .collect::<Result<Vec<_>>>()?;
    LabeledFeatureSet::new(Matrix::new(n, d, data)?, labels, split)
}

/// Little-endian cursor shared by the binary formats of the crate.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Format(format!("length {v} too large")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn u64_vec(&mut self, n: usize) -> Result<Vec<u64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Parameters of the Gaussian-cluster generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub seed: u64,
}

/// Gaussian clusters, one per class. Class means are standard-normal vectors
/// drawn from `seed` alone, so the train and test splits of one seed share
/// their clusters while their samples come from separate streams.
pub fn generate_synthetic(spec: &SyntheticSpec, split: Split) -> Result<LabeledFeatureSet> {
    if spec.num_classes < 2 {
        return Err(Error::Argument("synthetic data needs at least 2 classes".into()));
    }
    if spec.samples_per_class == 0 {
        return Err(Error::Argument("samples_per_class must be positive".into()));
    }
    if spec.dim < 2 {
        return Err(Error::Argument("synthetic dimensionality must be at least 2".into()));
    }
    if !(spec.spread.is_finite() && spec.spread > 0.0) {
        return Err(Error::Argument("spread must be a positive real".into()));
    }

    let mut mean_rng = seed::rng(spec.seed, "synthetic-means", 0);
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..spec.dim).map(|_| StandardNormal.sample(&mut mean_rng)).collect())
        .collect();

    let stream = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    let mut rng = seed::rng(spec.seed, "synthetic-samples", stream);
    let n = spec.num_classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            for &m in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(m + spec.spread * z);
            }
            labels.push(class);
        }
    }
    LabeledFeatureSet::new(Matrix::new(n, spec.dim, data)?, labels, split)
}

/// Train and test splits drawn from the same clusters.
pub fn generate_corpus(spec: &SyntheticSpec, test_per_class: usize) -> Result<Corpus> {
    let train = generate_synthetic(spec, Split::Train)?;
    let test_spec = SyntheticSpec {
        samples_per_class: test_per_class,
        ..*spec
    };
    let test = generate_synthetic(&test_spec, Split::Test)?;
    Corpus::new(train, test)
}

/// Ordered partition of the classes into `T` states of `n` classes each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IncrementalStream {
    class_order: Vec<usize>,
    num_states: usize,
    classes_per_state: usize,
    #[serde(skip)]
    slot_of_label: BTreeMap<usize, usize>,
}

impl IncrementalStream {
    pub fn from_order(class_order: Vec<usize>, num_states: usize) -> Result<Self> {
        if num_states == 0 {
            return Err(Error::Partition("number of states must be at least 1".into()));
        }
        if class_order.is_empty() || !class_order.len().is_multiple_of(num_states) {
            return Err(Error::Partition(format!(
                "{} classes cannot be split evenly into {num_states} states",
                class_order.len()
            )));
        }
        let slot_of_label: BTreeMap<_, _> = class_order
            .iter()
            .enumerate()
            .map(|(slot, &label)| (label, slot))
            .collect();
        if slot_of_label.len() != class_order.len() {
            return Err(Error::Partition("class order contains duplicates".into()));
        }
        Ok(Self {
            classes_per_state: class_order.len() / num_states,
            class_order,
            num_states,
            slot_of_label,
        })
    }

    pub fn class_order(&self) -> &[usize] {
        &self.class_order
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn classes_per_state(&self) -> usize {
        self.classes_per_state
    }

    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }

    pub fn slot_of(&self, label: usize) -> Option<usize> {
        self.slot_of_label.get(&label).copied()
    }

    pub fn label_of(&self, slot: usize) -> usize {
        self.class_order[slot]
    }

    pub fn state_of_slot(&self, slot: usize) -> usize {
        slot / self.classes_per_state
    }

    pub fn state_of_class(&self, label: usize) -> Option<usize> {
        self.slot_of(label).map(|s| self.state_of_slot(s))
    }

    /// Slots of the classes that arrive in state `t`.
    pub fn slots_of_state(&self, t: usize) -> Range<usize> {
        t * self.classes_per_state..(t + 1) * self.classes_per_state
    }

    /// Labels of the classes that arrive in state `t`.
    pub fn classes_of_state(&self, t: usize) -> &[usize] {
        &self.class_order[self.slots_of_state(t)]
    }

    /// `N_t`, the number of classes seen once state `t` is complete.
    pub fn seen_after(&self, t: usize) -> usize {
        (t + 1) * self.classes_per_state
    }

    fn check_state(&self, t: usize) -> Result<()> {
        if t >= self.num_states {
            return Err(Error::Argument(format!(
                "state {t} out of range for a stream of {} states",
                self.num_states
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stream serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            class_order: Vec<usize>,
            num_states: usize,
        }
        let raw: Raw = serde_json::from_str(s).map_err(|e| Error::Format(format!("stream: {e}")))?;
        Self::from_order(raw.class_order, raw.num_states)
    }
}

pub fn partition_stream(dataset: &LabeledFeatureSet, num_states: usize, seed: u64) -> Result<IncrementalStream> {
    let mut order = dataset.classes();
    if num_states == 0 || !order.len().is_multiple_of(num_states) {
        return Err(Error::Partition(format!(
            "{} classes are not divisible into {num_states} states",
            order.len()
        )));
    }
    order.shuffle(&mut seed::rng(seed, "class-order", 0));
    IncrementalStream::from_order(order, num_states)
}

/// Counts training reads by (state of the sample's class, state during which it was read).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessAudit {
    reads: Vec<Vec<u64>>,
}

impl AccessAudit {
    pub fn new(num_states: usize) -> Self {
        Self {
            reads: vec![vec![0; num_states]; num_states],
        }
    }

    pub fn record(&mut self, class_state: usize, read_state: usize) {
        self.reads[class_state][read_state] += 1;
    }

    /// `reads()[class_state][read_state]`.
    pub fn reads(&self) -> &[Vec<u64>] {
        &self.reads
    }

    pub fn total_reads(&self) -> u64 {
        self.reads.iter().flatten().sum()
    }

    pub fn cross_state_reads(&self) -> u64 {
        self.reads
            .iter()
            .enumerate()
            .flat_map(|(c, row)| row.iter().enumerate().filter(move |(r, _)| *r != c).map(|(_, n)| n))
            .sum()
    }

    pub fn is_memoryless(&self) -> bool {
        self.cross_state_reads() == 0
    }
}

/// Samples of some classes with targets expressed as stream slots.
#[derive(Debug, Clone, PartialEq)]
pub struct StateView {
    pub state: usize,
    pub features: Matrix,
    pub targets: Vec<usize>,
    /// Row indices into the source dataset.
    pub sample_indices: Vec<usize>,
}

impl StateView {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn select(state: usize, dataset: &LabeledFeatureSet, stream: &IncrementalStream, indices: Vec<usize>) -> Self {
        let targets = indices
            .iter()
            .map(|&i| {
                stream
                    .slot_of(dataset.labels[i])
                    .expect("selected labels belong to the stream")
            })
            .collect();
        Self {
            state,
            features: dataset.features.select_rows(&indices),
            targets,
            sample_indices: indices,
        }
    }
}

/// Training samples of the classes that arrive in state `t`, and nothing else.
pub fn state_training_view(
    stream: &IncrementalStream,
    dataset: &LabeledFeatureSet,
    t: usize,
    audit: &mut AccessAudit,
) -> Result<StateView> {
    stream.check_state(t)?;
    let indices: Vec<usize> = dataset
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| stream.state_of_class(l) == Some(t))
        .map(|(i, _)| i)
        .collect();
    for &i in &indices {
        let class_state = stream.state_of_class(dataset.labels[i]).expect("filtered above");
        audit.record(class_state, t);
    }
    Ok(StateView::select(t, dataset, stream, indices))
}

/// Test samples of every class seen up to and including state `t`.
///
/// Evaluation data is not memory-restricted, so no audit is involved.
pub fn evaluation_view(stream: &IncrementalStream, dataset: &LabeledFeatureSet, t: usize) -> Result<StateView> {
    stream.check_state(t)?;
    let indices = dataset
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| stream.state_of_class(l).is_some_and(|s| s <= t))
        .map(|(i, _)| i)
        .collect();
    Ok(StateView::select(t, dataset, stream, indices))
}

/// Test samples of the classes of one state only.
pub fn state_test_view(stream: &IncrementalStream, dataset: &LabeledFeatureSet, t: usize) -> Result<StateView> {
    stream.check_state(t)?;
    let indices = dataset
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| stream.state_of_class(l) == Some(t))
        .map(|(i, _)| i)
        .collect();
    Ok(StateView::select(t, dataset, stream, indices))
}
