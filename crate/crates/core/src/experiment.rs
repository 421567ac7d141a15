//! Config-driven experiment runs and their on-disk artifacts.
//!
//! A run directory looks like this:
//!
//! ```text
//! manifest.json          status + sha256 of every artifact below
//! config.toml            resolved configuration
//! stream.json            class order and state partition
//! audit.json             training-data access audit
//! data/train.bin         packed datasets
//! data/test.bin
//! ft/model_<t>.bin       one checkpoint per state and backbone
//! ft/bank.bin            weight bank of the chain
//! ft/trace.csv           per-epoch training trace
//! reports/<method>.json  MetricsReport per grid entry
//! reports/<method>.csv   per-state rows of the same report
//! summary.csv
//! ```
//!
//! The manifest is written with status `incomplete` before any training and
//! rewritten as `complete` once every artifact exists, so an aborted run is
//! never mistaken for a finished one.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    distribution_stats, feature_similarity, magnitude_profile, train_chain_with_memory, ExemplarMemory, MagnitudeMode,
    MagnitudeProfile, RowDistribution, SimilarityProfile, DEFAULT_BINS,
};
use crate::datahub::{
    generate_corpus, load_dataset, partition_stream, save_dataset, state_test_view, AccessAudit, Corpus, DataFormat,
    IncrementalStream, LabeledFeatureSet, Split, SyntheticSpec,
};
use crate::engine::{evaluate_method, train_chain, train_independent, Chain, TrainingPlan};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::{g_il, GilInput, MetricsReport};
use crate::neuralnet::{Distillation, Model, TrainSpec};
use crate::normalize::standardize;
use crate::scoring::{Backbone, Method};
use crate::weightbank::WeightBank;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub states: usize,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub lwf: LwfConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    /// Run directory; the command line may override it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        num_classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        dim: usize,
        spread: f64,
    },
    /// CSV or packed files; the format follows the extension.
    Files { train: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![128, 128] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub incremental_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub plateau_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            incremental_epochs: 70,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.02,
            patience: 5,
            plateau_factor: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LwfConfig {
    pub temperature: f64,
    pub weight: f64,
}

impl Default for LwfConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub grid: Vec<Method>,
}

/// Every FT-based entry that can be built from one chain.
pub fn default_grid() -> Vec<Method> {
    [
        "FT",
        "FT^mc",
        "inFT",
        "inFT^mc",
        "inFT_L2",
        "inFT_L2^mc",
        "inFT_min-max",
        "inFT_mean",
        "inFT_siw",
        "inFT_siw^mc",
    ]
    .iter()
    .map(|m| m.parse().expect("valid method name"))
    .collect()
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { grid: default_grid() }
    }
}

impl ExperimentConfig {
    /// Desk-scale default: 20 synthetic classes in 10 states.
    pub fn desk(seed: u64) -> Self {
        Self {
            name: "desk".into(),
            seed,
            states: 10,
            dataset: DatasetConfig::Synthetic {
                num_classes: 20,
                train_per_class: 200,
                test_per_class: 50,
                dim: 16,
                spread: 0.7,
            },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            lwf: LwfConfig::default(),
            evaluation: EvaluationConfig::default(),
            output: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.states == 0 {
            return Err(Error::Config("states must be at least 1".into()));
        }
        if self.evaluation.grid.is_empty() {
            return Err(Error::Config("evaluation grid is empty".into()));
        }
        if let DatasetConfig::Synthetic {
            num_classes,
            train_per_class,
            test_per_class,
            dim,
            spread,
        } = self.dataset
        {
            if num_classes == 0 || train_per_class == 0 || test_per_class == 0 || dim == 0 {
                return Err(Error::Config("synthetic dataset sizes must be positive".into()));
            }
            if !(spread.is_finite() && spread > 0.0) {
                return Err(Error::Config("synthetic spread must be positive".into()));
            }
            if num_classes % self.states != 0 {
                return Err(Error::Config(format!(
                    "{num_classes} classes cannot be split evenly into {} states",
                    self.states
                )));
            }
        }
        self.plan().validate()
    }

    pub fn plan(&self) -> TrainingPlan {
        let t = &self.train;
        let initial = TrainSpec {
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            plateau_patience: t.patience,
            plateau_factor: t.plateau_factor,
            distillation: Distillation::Off,
            seed: self.seed,
        };
        TrainingPlan {
            hidden: self.model.hidden.clone(),
            initial,
            incremental: TrainSpec {
                epochs: t.incremental_epochs,
                ..initial
            },
            lwf: Distillation::On {
                temperature: self.lwf.temperature,
                weight: self.lwf.weight,
            },
            seed: self.seed,
        }
    }

    /// Backbones needed by the grid, in a fixed order.
    pub fn backbones(&self) -> Vec<Backbone> {
        let mut b: Vec<Backbone> = self.evaluation.grid.iter().map(|m| m.backbone).collect();
        b.sort();
        b.dedup();
        b
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        match &self.dataset {
            DatasetConfig::Synthetic {
                num_classes,
                train_per_class,
                test_per_class,
                dim,
                spread,
            } => generate_corpus(
                &SyntheticSpec {
                    num_classes: *num_classes,
                    samples_per_class: *train_per_class,
                    dim: *dim,
                    spread: *spread,
                    seed: self.seed,
                },
                *test_per_class,
            ),
            DatasetConfig::Files { train, test } => Corpus::new(
                load_dataset(train, DataFormat::from_path(train), Split::Train)?,
                load_dataset(test, DataFormat::from_path(test), Split::Test)?,
            ),
        }
    }
}

/// File-system safe name of a grid entry, e.g. `inFT_siw^mc` → `inFT_siw_mc`.
pub fn method_file_stem(method: &Method) -> String {
    method.to_string().replace('^', "_")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Incomplete,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub seed: u64,
    pub status: RunStatus,
    /// Relative path → hex sha256.
    pub files: BTreeMap<String, String>,
}

pub const MANIFEST: &str = "manifest.json";

impl Manifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    fn save(&self, run_dir: &Path) -> Result<()> {
        write_file(
            &run_dir.join(MANIFEST),
            serde_json::to_string_pretty(self)
                .expect("manifest serializes")
                .as_bytes(),
        )
    }

    /// Re-hashes every listed artifact.
    pub fn verify(&self, run_dir: &Path) -> Result<()> {
        if self.status != RunStatus::Complete {
            return Err(Error::Integrity(format!(
                "run {} is marked incomplete",
                run_dir.display()
            )));
        }
        for (rel, expected) in &self.files {
            let path = run_dir.join(rel);
            let bytes = fs::read(&path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::Integrity(format!("missing artifact {rel}")),
                _ => Error::io(&path, e),
            })?;
            if sha256_hex(&bytes) != *expected {
                return Err(Error::Integrity(format!("digest mismatch for {rel}")));
            }
        }
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Collects artifact digests as files are written.
struct ArtifactWriter<'a> {
    root: &'a Path,
    files: BTreeMap<String, String>,
}

impl ArtifactWriter<'_> {
    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_file(&self.root.join(rel), bytes)?;
        self.files.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn record(&mut self, rel: &str) -> Result<()> {
        let path = self.root.join(rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.files.insert(rel.to_string(), sha256_hex(&bytes));
        Ok(())
    }
}

/// In-memory result of a run, next to what was written to disk.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub corpus: Corpus,
    pub stream: IncrementalStream,
    pub chains: Vec<Chain>,
    pub reports: Vec<MetricsReport>,
    pub audit: AccessAudit,
}

impl RunArtifacts {
    pub fn chain(&self, backbone: Backbone) -> Option<&Chain> {
        self.chains.iter().find(|c| c.backbone == backbone)
    }

    pub fn report(&self, method: &str) -> Option<&MetricsReport> {
        self.reports.iter().find(|r| r.method == method)
    }
}

fn trace_csv(chain: &Chain) -> String {
    let mut out = String::from("state,epoch,lr,loss,accuracy\n");
    for (t, trace) in chain.traces.iter().enumerate() {
        for r in trace {
            out.push_str(&format!("{t},{},{:e},{:.6},{:.4}\n", r.epoch, r.lr, r.loss, r.accuracy));
        }
    }
    out
}

/// Accuracy summary of a set of reports: one row per method.
pub fn summary_csv(reports: &[MetricsReport]) -> String {
    let states = reports.iter().map(|r| r.per_state.len()).max().unwrap_or(0);
    let mut out = String::from("method,avg_top1,avg_top5");
    for t in 0..states {
        out.push_str(&format!(",top1_s{t}"));
    }
    out.push('\n');
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    for r in reports {
        out.push_str(&format!(
            "{},{},{}",
            r.method,
            cell(r.average_incremental_top1),
            cell(r.average_incremental_top5)
        ));
        for s in &r.per_state {
            out.push_str(&format!(",{:.4}", s.top1));
        }
        out.push('\n');
    }
    out
}

fn evaluate_grid(
    grid: &[Method],
    chains: &[Chain],
    stream: &IncrementalStream,
    test: &LabeledFeatureSet,
) -> Result<Vec<MetricsReport>> {
    grid.iter()
        .map(|m| {
            let chain = chains
                .iter()
                .find(|c| c.backbone == m.backbone)
                .ok_or_else(|| Error::Config(format!("no {} chain for {m}", m.backbone.as_str())))?;
            evaluate_method(m, chain, stream, test)
        })
        .collect()
}

/// Trains one chain per backbone, evaluates the grid and writes the run directory.
pub fn run_experiment(config: &ExperimentConfig, run_dir: &Path) -> Result<RunArtifacts> {
    config.validate()?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let mut manifest = Manifest {
        name: config.name.clone(),
        seed: config.seed,
        status: RunStatus::Incomplete,
        files: BTreeMap::new(),
    };
    manifest.save(run_dir)?;
    let mut w = ArtifactWriter {
        root: run_dir,
        files: BTreeMap::new(),
    };
    w.write("config.toml", config.to_toml().as_bytes())?;

    let corpus = config.load_corpus()?;
    let stream = partition_stream(&corpus.train, config.states, config.seed)?;
    let data_dir = run_dir.join("data");
    fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
    for (rel, set) in [("data/train.bin", &corpus.train), ("data/test.bin", &corpus.test)] {
        save_dataset(set, &run_dir.join(rel), DataFormat::Packed)?;
        w.record(rel)?;
    }
    w.write("stream.json", stream.to_json().as_bytes())?;

    let plan = config.plan();
    let mut audit = AccessAudit::new(stream.num_states());
    let mut chains = Vec::new();
    for backbone in config.backbones() {
        let chain = train_chain(&corpus.train, &stream, &plan, backbone, &mut audit)?;
        let dir = backbone.as_str();
        for (t, model) in chain.models.iter().enumerate() {
            w.write(&format!("{dir}/model_{t}.bin"), &model.to_bytes())?;
        }
        w.write(&format!("{dir}/bank.bin"), &chain.bank.to_bytes())?;
        w.write(&format!("{dir}/trace.csv"), trace_csv(&chain).as_bytes())?;
        chains.push(chain);
    }
    w.write(
        "audit.json",
        serde_json::to_string_pretty(&audit)
            .expect("audit serializes")
            .as_bytes(),
    )?;

    let reports = evaluate_grid(&config.evaluation.grid, &chains, &stream, &corpus.test)?;
    for (m, r) in config.evaluation.grid.iter().zip(&reports) {
        let stem = method_file_stem(m);
        w.write(&format!("reports/{stem}.json"), r.to_json().as_bytes())?;
        w.write(&format!("reports/{stem}.csv"), r.states_csv().as_bytes())?;
    }
    w.write("summary.csv", summary_csv(&reports).as_bytes())?;

    manifest.files = w.files;
    manifest.status = RunStatus::Complete;
    manifest.save(run_dir)?;
    Ok(RunArtifacts {
        run_dir: run_dir.to_path_buf(),
        corpus,
        stream,
        chains,
        reports,
        audit,
    })
}

/// A completed run reloaded from disk after integrity checks.
#[derive(Debug, Clone)]
pub struct StoredRun {
    pub config: ExperimentConfig,
    pub corpus: Corpus,
    pub stream: IncrementalStream,
    pub chains: Vec<Chain>,
}

impl StoredRun {
    pub fn open(run_dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(run_dir)?;
        manifest.verify(run_dir)?;
        let read = |rel: &str| {
            let path = run_dir.join(rel);
            fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
        };
        let config = ExperimentConfig::from_toml(&read("config.toml")?)?;
        let stream = IncrementalStream::from_json(&read("stream.json")?)?;
        let corpus = Corpus::new(
            load_dataset(&run_dir.join("data/train.bin"), DataFormat::Packed, Split::Train)?,
            load_dataset(&run_dir.join("data/test.bin"), DataFormat::Packed, Split::Test)?,
        )?;
        let mut chains = Vec::new();
        for backbone in config.backbones() {
            let dir = run_dir.join(backbone.as_str());
            let models = (0..stream.num_states())
                .map(|t| Model::load(&dir.join(format!("model_{t}.bin"))))
                .collect::<Result<Vec<_>>>()?;
            let bank = WeightBank::load(&dir.join("bank.bin"))?;
            chains.push(Chain {
                backbone,
                models,
                bank,
                traces: Vec::new(),
            });
        }
        Ok(Self {
            config,
            corpus,
            stream,
            chains,
        })
    }

    pub fn chain(&self, backbone: Backbone) -> Option<&Chain> {
        self.chains.iter().find(|c| c.backbone == backbone)
    }
}

/// Scores the stored grid plus `extra_grid` from a completed run without training.
/// Extra entries must use a backbone the run trained.
pub fn evaluate_only(run_dir: &Path, extra_grid: &[Method]) -> Result<Vec<MetricsReport>> {
    let run = StoredRun::open(run_dir)?;
    let mut grid = run.config.evaluation.grid.clone();
    for m in extra_grid {
        if !grid.contains(m) {
            grid.push(*m);
        }
    }
    evaluate_grid(&grid, &run.chains, &run.stream, &run.corpus.test)
}

/// G_IL per method row of an accuracy CSV: a `method` column, one column per
/// configuration, a `Full` row and optionally an existing `G_IL` column, which is ignored.
pub fn g_il_table(csv_text: &str) -> Result<Vec<(String, f64)>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(csv_text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    let value_cols: Vec<usize> = (1..headers.len())
        .filter(|&i| !headers[i].eq_ignore_ascii_case("G_IL"))
        .collect();
    if value_cols.is_empty() {
        return Err(Error::Format("table has no configuration columns".into()));
    }
    let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
    let mut full = None;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Load {
            line: i + 2,
            message: e.to_string(),
        })?;
        let values = value_cols
            .iter()
            .map(|&c| {
                record.get(c).unwrap_or("").parse::<f64>().map_err(|_| Error::Load {
                    line: i + 2,
                    message: format!("column {:?} is not a number", &headers[c]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let name = record.get(0).unwrap_or("").to_string();
        if name == "Full" {
            full = Some(values);
        } else {
            rows.push((name, values));
        }
    }
    let full = full.ok_or_else(|| Error::Format("table has no Full row".into()))?;
    rows.into_iter()
        .map(|(name, values)| {
            let g = g_il(&GilInput::new(values.into_iter().zip(full.iter().copied()).collect()))?;
            Ok((name, g))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedStat {
    pub method: String,
    pub mean_top1: f64,
    pub std_top1: f64,
    pub mean_top5: f64,
    pub std_top5: f64,
    pub seeds: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Mean and sample standard deviation of the average incremental accuracies over seeds.
pub fn seed_summary(per_seed: &[Vec<MetricsReport>]) -> Vec<SeedStat> {
    let mut by_method: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for reports in per_seed {
        for r in reports {
            let (Some(a1), Some(a5)) = (r.average_incremental_top1, r.average_incremental_top5) else {
                continue;
            };
            if !by_method.contains_key(r.method.as_str()) {
                order.push(&r.method);
            }
            let e = by_method.entry(&r.method).or_default();
            e.0.push(a1);
            e.1.push(a5);
        }
    }
    order
        .into_iter()
        .map(|m| {
            let (t1, t5) = &by_method[m];
            let (mean_top1, std_top1) = mean_std(t1);
            let (mean_top5, std_top5) = mean_std(t5);
            SeedStat {
                method: m.to_string(),
                mean_top1,
                std_top1,
                mean_top5,
                std_top5,
                seeds: t1.len(),
            }
        })
        .collect()
}

pub fn seed_summary_csv(stats: &[SeedStat]) -> String {
    let mut out = String::from("method,seeds,mean_top1,std_top1,mean_top5,std_top5\n");
    for s in stats {
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4},{:.4}\n",
            s.method, s.seeds, s.mean_top1, s.std_top1, s.mean_top5, s.std_top5
        ));
    }
    out
}

/// Runs `config` once per seed into `out/seed_<n>` and writes `out/seeds.csv`.
pub fn run_seeds(config: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<Vec<SeedStat>> {
    if seeds.is_empty() {
        return Err(Error::Config("seed list is empty".into()));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = ExperimentConfig { seed, ..config.clone() };
        per_seed.push(run_experiment(&cfg, &out.join(format!("seed_{seed}")))?.reports);
    }
    let stats = seed_summary(&per_seed);
    write_file(&out.join("seeds.csv"), seed_summary_csv(&stats).as_bytes())?;
    Ok(stats)
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub magnitude_raw: MagnitudeProfile,
    pub magnitude_standardized: MagnitudeProfile,
    pub similarity_chain: SimilarityProfile,
    pub similarity_independent: SimilarityProfile,
    /// `(memory fraction, profile)`; filled only when requested.
    pub similarity_memory: Vec<(f64, SimilarityProfile)>,
    /// Last-state head rows: raw, then standardized.
    pub distribution_raw: Vec<RowDistribution>,
    pub distribution_standardized: Vec<RowDistribution>,
    /// Cross-state reads of the exemplar-memory chains.
    pub memory_cross_state_reads: u64,
}

#[derive(Debug, Clone, Default)]
pub struct AnalysisOptions {
    /// Exemplar memory sizes as fractions of the training set, e.g. `[0.01, 0.02]`.
    pub memory_fractions: Vec<f64>,
}

/// Magnitude, similarity and distribution studies of a trained FT chain.
/// The reference state for similarities is the last one; the probe is the state-0 test split.
pub fn analyze(
    chain: &Chain,
    corpus: &Corpus,
    stream: &IncrementalStream,
    plan: &TrainingPlan,
    options: &AnalysisOptions,
) -> Result<AnalysisReport> {
    let n = stream.classes_per_state();
    let origin: Vec<usize> = (0..stream.num_classes()).map(|slot| slot / n).collect();
    let heads: Vec<&Matrix> = chain.models.iter().map(|m| m.head_weights()).collect();
    let reference = chain.models.len() - 1;
    let probe = state_test_view(stream, &corpus.test, 0)?.features;

    let mut audit = AccessAudit::new(stream.num_states());
    let independent = train_independent(&corpus.train, stream, plan, &mut audit)?;
    let mut similarity_memory = Vec::new();
    let mut memory_audit = AccessAudit::new(stream.num_states());
    for &f in &options.memory_fractions {
        let memory = ExemplarMemory::new(corpus.train.len(), f, plan.seed)?;
        let models = train_chain_with_memory(&corpus.train, stream, plan, &memory, &mut memory_audit)?;
        similarity_memory.push((f, feature_similarity(&models, reference, &probe)?));
    }

    let last = heads[reference];
    let standardized = Matrix::from_rows(&last.iter_rows().map(standardize).collect::<Result<Vec<_>>>()?)?;
    Ok(AnalysisReport {
        magnitude_raw: magnitude_profile(&heads, &origin, MagnitudeMode::Raw)?,
        magnitude_standardized: magnitude_profile(&heads, &origin, MagnitudeMode::Standardized)?,
        similarity_chain: feature_similarity(&chain.models, reference, &probe)?,
        similarity_independent: feature_similarity(&independent, reference, &probe)?,
        similarity_memory,
        distribution_raw: distribution_stats(last, DEFAULT_BINS)?,
        distribution_standardized: distribution_stats(&standardized, DEFAULT_BINS)?,
        memory_cross_state_reads: memory_audit.cross_state_reads(),
    })
}

fn magnitude_csv(p: &MagnitudeProfile) -> String {
    let mut out = String::from("state,new_mean,past_mean\n");
    for s in &p.states {
        out.push_str(&format!(
            "{},{:.6},{}\n",
            s.state,
            s.new_mean,
            s.past_mean.map(|v| format!("{v:.6}")).unwrap_or_default()
        ));
    }
    out
}

fn similarity_csv(r: &AnalysisReport) -> String {
    let mut out = String::from("state,distance,fine_tuning,independent");
    for (f, _) in &r.similarity_memory {
        out.push_str(&format!(",memory_{f}"));
    }
    out.push('\n');
    let reference = r.similarity_chain.reference_state;
    for (s, v) in r.similarity_chain.per_state.iter().enumerate() {
        out.push_str(&format!(
            "{s},{},{v:.6},{:.6}",
            reference.abs_diff(s),
            r.similarity_independent.per_state[s]
        ));
        for (_, p) in &r.similarity_memory {
            out.push_str(&format!(",{:.6}", p.per_state[s]));
        }
        out.push('\n');
    }
    out
}

fn distribution_csv(rows: &[RowDistribution]) -> String {
    let mut out = String::from("row,mean,std,skewness,excess_kurtosis,min,max,histogram\n");
    for (i, d) in rows.iter().enumerate() {
        let hist: Vec<String> = d.histogram.iter().map(|c| c.to_string()).collect();
        out.push_str(&format!(
            "{i},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            d.mean,
            d.std,
            d.skewness,
            d.excess_kurtosis,
            d.min,
            d.max,
            hist.join(";")
        ));
    }
    out
}

/// Writes the analysis plot data as CSV files plus one JSON document.
pub fn write_analysis(report: &AnalysisReport, out: &Path) -> Result<()> {
    write_file(
        &out.join("magnitude_raw.csv"),
        magnitude_csv(&report.magnitude_raw).as_bytes(),
    )?;
    write_file(
        &out.join("magnitude_standardized.csv"),
        magnitude_csv(&report.magnitude_standardized).as_bytes(),
    )?;
    write_file(&out.join("similarity.csv"), similarity_csv(report).as_bytes())?;
    write_file(
        &out.join("distribution_raw.csv"),
        distribution_csv(&report.distribution_raw).as_bytes(),
    )?;
    write_file(
        &out.join("distribution_standardized.csv"),
        distribution_csv(&report.distribution_standardized).as_bytes(),
    )?;
    write_file(
        &out.join("analysis.json"),
        serde_json::to_string_pretty(report)
            .expect("analysis serializes")
            .as_bytes(),
    )
}

/// Analysis of a stored run's FT chain, written to `out`.
pub fn analyze_run(run_dir: &Path, out: &Path, options: &AnalysisOptions) -> Result<AnalysisReport> {
    let run = StoredRun::open(run_dir)?;
    let chain = run
        .chain(Backbone::Ft)
        .ok_or_else(|| Error::Config("analysis needs the FT chain in the run".into()))?;
    let report = analyze(chain, &run.corpus, &run.stream, &run.config.plan(), options)?;
    write_analysis(&report, out)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            name: "tiny".into(),
            seed,
            states: 2,
            dataset: DatasetConfig::Synthetic {
                num_classes: 4,
                train_per_class: 20,
                test_per_class: 5,
                dim: 4,
                spread: 0.5,
            },
            model: ModelConfig { hidden: vec![8] },
            train: TrainConfig {
                epochs: 3,
                incremental_epochs: 2,
                ..TrainConfig::default()
            },
            lwf: LwfConfig::default(),
            evaluation: EvaluationConfig {
                grid: vec![
                    "FT".parse().unwrap(),
                    "inFT_siw^mc".parse().unwrap(),
                    "LwF".parse().unwrap(),
                ],
            },
            output: None,
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = ExperimentConfig::desk(3);
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = ExperimentConfig::desk(1)
            .to_toml()
            .replace("[train]", "[train]\nepochz = 3");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
        let text = format!("colour = 1\n{}", ExperimentConfig::desk(1).to_toml());
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = ExperimentConfig::desk(1);
        c.states = 3;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::desk(1);
        c.train.lr = -1.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::desk(1);
        c.evaluation.grid.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let text = r#"
name = "m"
states = 2
[dataset]
source = "synthetic"
num_classes = 4
train_per_class = 10
test_per_class = 2
dim = 3
spread = 1.0
"#;
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.evaluation.grid, default_grid());
        assert_eq!(c.backbones(), vec![Backbone::Ft]);
    }

    #[test]
    fn file_stems() {
        assert_eq!(method_file_stem(&"inFT_siw^mc".parse().unwrap()), "inFT_siw_mc");
        assert_eq!(method_file_stem(&"inLwF_min-max".parse().unwrap()), "inLwF_min-max");
    }

    #[test]
    fn run_writes_a_complete_verifiable_directory() {
        let dir = tempfile::tempdir().unwrap();
        let run = run_experiment(&tiny(5), dir.path()).unwrap();
        let manifest = Manifest::load(dir.path()).unwrap();
        assert_eq!(manifest.status, RunStatus::Complete);
        assert!(manifest.files.contains_key("ft/bank.bin"));
        assert!(manifest.files.contains_key("lwf/model_1.bin"));
        assert!(manifest.files.contains_key("reports/inFT_siw_mc.json"));
        manifest.verify(dir.path()).unwrap();
        assert!(run.audit.is_memoryless());
        assert_eq!(run.reports.len(), 3);

        let again = evaluate_only(dir.path(), &[]).unwrap();
        for (a, b) in run.reports.iter().zip(&again) {
            assert_eq!(a.to_json(), b.to_json());
        }
    }

    #[test]
    fn corrupted_bank_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        run_experiment(&tiny(6), dir.path()).unwrap();
        let bank = dir.path().join("ft/bank.bin");
        let mut bytes = fs::read(&bank).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&bank, bytes).unwrap();
        assert!(matches!(evaluate_only(dir.path(), &[]), Err(Error::Integrity(_))));
    }

    #[test]
    fn incomplete_runs_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        run_experiment(&tiny(7), dir.path()).unwrap();
        let mut m = Manifest::load(dir.path()).unwrap();
        m.status = RunStatus::Incomplete;
        m.save(dir.path()).unwrap();
        assert!(matches!(StoredRun::open(dir.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn g_il_of_full_is_zero_and_full_row_is_required() {
        let csv = "method,a,b\nsame,50,60\nFull,50,60\n";
        assert_eq!(g_il_table(csv).unwrap(), vec![("same".to_string(), 0.0)]);
        assert!(matches!(g_il_table("method,a\nx,1\n"), Err(Error::Format(_))));
        let with_existing = "method,a,G_IL\nx,25,-0.5\nFull,50,\n";
        assert_eq!(g_il_table(with_existing).unwrap()[0].1, -0.5);
    }

    #[test]
    fn seed_summary_mean_and_sample_std() {
        let report = |v: f64| {
            let mut r = MetricsReport::new("FT", Vec::new(), Vec::new());
            r.average_incremental_top1 = Some(v);
            r.average_incremental_top5 = Some(v + 10.0);
            r
        };
        let stats = seed_summary(&[vec![report(10.0)], vec![report(20.0)]]);
        assert_eq!(stats[0].mean_top1, 15.0);
        assert!((stats[0].std_top1 - 50f64.sqrt()).abs() < 1e-12);
        assert_eq!(stats[0].mean_top5, 25.0);
    }
}
