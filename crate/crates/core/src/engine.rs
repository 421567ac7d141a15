//! Training chains over the incremental stream and per-method evaluation.
//!
//! One chain is trained per backbone: state 0 from scratch, then every state
//! `t ≥ 1` from the previous model with its head extended by the new classes.
//! After each state the new classes are frozen into the chain's weight bank.
//! Every method of the evaluation grid is a reinterpretation of a chain's
//! stored models and bank; evaluation never trains.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::datahub::{
    evaluation_view, state_training_view, AccessAudit, IncrementalStream, LabeledFeatureSet, StateView,
};
use crate::error::{Error, Result};
use crate::metrics::{error_typology, topk_accuracy, MetricsReport, StateMetrics};
use crate::neuralnet::{extend_head, train_state, Distillation, EpochRecord, Model, TrainSpec};
use crate::scoring::{apply_classifier, build_classifier, Backbone, Method};
use crate::seed;
use crate::weightbank::WeightBank;

/// Everything needed to train a chain, apart from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPlan {
    pub hidden: Vec<usize>,
    /// Schedule of the non-incremental state 0.
    pub initial: TrainSpec,
    /// Schedule of states `t ≥ 1`; its `base_lr` is divided by `t`.
    pub incremental: TrainSpec,
    /// Distillation used by the LwF backbone in states `t ≥ 1`.
    pub lwf: Distillation,
    pub seed: u64,
}

impl TrainingPlan {
    fn spec_for(&self, backbone: Backbone, state: usize) -> TrainSpec {
        let mut spec = if state == 0 { self.initial } else { self.incremental };
        spec.seed = self.seed;
        spec.distillation = match backbone {
            Backbone::Lwf if state > 0 => self.lwf,
            _ => Distillation::Off,
        };
        spec
    }

    pub fn validate(&self) -> Result<()> {
        self.initial.validate()?;
        self.incremental.validate()?;
        TrainSpec {
            distillation: self.lwf,
            ..self.incremental
        }
        .validate()?;
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Models of every state plus the bank built along the way.
#[derive(Debug, Clone)]
pub struct Chain {
    pub backbone: Backbone,
    pub models: Vec<Model>,
    pub bank: WeightBank,
    pub traces: Vec<Vec<EpochRecord>>,
}

struct RawChain {
    models: Vec<Model>,
    bank: Option<WeightBank>,
    traces: Vec<Vec<EpochRecord>>,
}

fn run_chain<F>(
    plan: &TrainingPlan,
    backbone: Backbone,
    stream: &IncrementalStream,
    input_dim: usize,
    record_bank: bool,
    mut view_for: F,
) -> Result<RawChain>
where
    F: FnMut(usize) -> Result<StateView>,
{
    let n = stream.classes_per_state();
    let mut models: Vec<Model> = Vec::with_capacity(stream.num_states());
    let mut traces = Vec::with_capacity(stream.num_states());
    let mut bank = None;
    for t in 0..stream.num_states() {
        let view = view_for(t)?;
        let spec = plan.spec_for(backbone, t);
        let (init, previous) = match models.last() {
            None => (
                Model::new(input_dim, &plan.hidden, n, seed::derive(plan.seed, "model", 0))?,
                None,
            ),
            Some(prev) => {
                let ext = extend_head(prev, n, plan.seed)?;
                let previous = matches!(spec.distillation, Distillation::On { .. }).then_some(prev);
                (ext, previous)
            }
        };
        let outcome = train_state(init, &view, &spec, previous).map_err(|e| annotate(e, backbone, t))?;
        if record_bank {
            bank.get_or_insert_with(|| WeightBank::new(outcome.model.feature_dim()))
                .record_state(&outcome.model, &view)
                .map_err(|e| annotate(e, backbone, t))?;
        }
        log::info!(
            "{} state {t}: final loss {:.4}, train acc {:.1}%",
            backbone.as_str(),
            outcome.trace.last().map_or(f64::NAN, |r| r.loss),
            outcome.trace.last().map_or(f64::NAN, |r| r.accuracy)
        );
        traces.push(outcome.trace);
        models.push(outcome.model);
    }
    Ok(RawChain { models, bank, traces })
}

fn annotate(e: Error, backbone: Backbone, t: usize) -> Error {
    let ctx = format!("{} chain, state {t}", backbone.as_str());
    match e {
        Error::Training(m) => Error::Training(format!("{ctx}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
        Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
        other => other,
    }
}

/// Memoryless chain: each state reads only its own classes' training data.
pub fn train_chain(
    train: &LabeledFeatureSet,
    stream: &IncrementalStream,
    plan: &TrainingPlan,
    backbone: Backbone,
    audit: &mut AccessAudit,
) -> Result<Chain> {
    let raw = run_chain(plan, backbone, stream, train.dim(), true, |t| {
        state_training_view(stream, train, t, audit)
    })?;
    Ok(Chain {
        backbone,
        models: raw.models,
        bank: raw.bank.expect("bank recorded for every state"),
        traces: raw.traces,
    })
}

/// Chain whose states may read something other than their own new classes
/// (used by the bounded-memory analysis). No bank is recorded.
pub(crate) fn train_chain_with_views<F>(
    input_dim: usize,
    stream: &IncrementalStream,
    plan: &TrainingPlan,
    view_for: F,
) -> Result<Vec<Model>>
where
    F: FnMut(usize) -> Result<StateView>,
{
    Ok(run_chain(plan, Backbone::Ft, stream, input_dim, false, view_for)?.models)
}

/// One model per state, each trained from scratch on that state's classes only.
pub fn train_independent(
    train: &LabeledFeatureSet,
    stream: &IncrementalStream,
    plan: &TrainingPlan,
    audit: &mut AccessAudit,
) -> Result<Vec<Model>> {
    let mut models = Vec::with_capacity(stream.num_states());
    for t in 0..stream.num_states() {
        let view = state_training_view(stream, train, t, audit)?;
        let init = Model::new(
            train.dim(),
            &plan.hidden,
            stream.seen_after(t),
            seed::derive(plan.seed, "independent", t as u64),
        )?;
        let spec = TrainSpec {
            seed: seed::derive(plan.seed, "independent-batches", t as u64),
            ..plan.spec_for(Backbone::Ft, 0)
        };
        models.push(train_state(init, &view, &spec, None)?.model);
    }
    Ok(models)
}

/// Scores every state of `chain` with `method` on the cumulative test set.
pub fn evaluate_method(
    method: &Method,
    chain: &Chain,
    stream: &IncrementalStream,
    test: &LabeledFeatureSet,
) -> Result<MetricsReport> {
    if method.backbone != chain.backbone {
        return Err(Error::Config(format!(
            "method {method} needs the {} chain, got {}",
            method.backbone.as_str(),
            chain.backbone.as_str()
        )));
    }
    let n = stream.classes_per_state();
    let mut per_state = Vec::with_capacity(chain.models.len());
    let mut warnings: Vec<String> = Vec::new();
    for (t, model) in chain.models.iter().enumerate() {
        let view = evaluation_view(stream, test, t)?;
        let classifier = build_classifier(&method.eval, model, Some(&chain.bank), t).map_err(|e| match e {
            Error::Degenerate { class, reason } => Error::Degenerate {
                class,
                reason: format!("{method}, state {t}: {reason}"),
            },
            other => other,
        })?;
        for w in classifier.warnings.iter() {
            if !warnings.contains(w) {
                warnings.push(w.clone());
            }
        }
        let scores = apply_classifier(&classifier, &model.features(&view.features)?)?;
        let classes = stream.seen_after(t);
        let past: BTreeSet<usize> = (0..t * n).collect();
        let new: BTreeSet<usize> = stream.slots_of_state(t).collect();
        per_state.push(StateMetrics {
            state: t,
            num_classes: classes,
            top1: topk_accuracy(&scores, &view.targets, 1)?,
            top5: topk_accuracy(&scores, &view.targets, classes.min(5))?,
            typology: error_typology(&scores, &view.targets, &past, &new)?,
        });
    }
    Ok(MetricsReport::new(method.to_string(), per_state, warnings))
}
