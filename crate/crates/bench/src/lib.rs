//! Fixtures shared by the benchmarks.

use siw_core::datahub::{generate_synthetic, partition_stream, state_training_view};
use siw_core::engine::{train_chain, TrainingPlan};
use siw_core::{
    AccessAudit, Backbone, Distillation, LabeledFeatureSet, Model, Split, StateView, SyntheticSpec, TrainSpec,
};

pub fn dataset(classes: usize, per_class: usize, dim: usize) -> LabeledFeatureSet {
    generate_synthetic(
        &SyntheticSpec {
            num_classes: classes,
            samples_per_class: per_class,
            dim,
            spread: 1.0,
            seed: 7,
        },
        Split::Train,
    )
    .expect("synthetic data")
}

pub fn first_state(set: &LabeledFeatureSet, states: usize) -> StateView {
    let stream = partition_stream(set, states, 7).expect("stream");
    state_training_view(&stream, set, 0, &mut AccessAudit::new(states)).expect("view")
}

pub fn model(dim: usize, hidden: &[usize], classes: usize) -> Model {
    Model::new(dim, hidden, classes, 7).expect("model")
}

/// A short FT chain with its bank, for scoring benchmarks.
pub fn short_chain(set: &LabeledFeatureSet, states: usize) -> siw_core::engine::Chain {
    let stream = partition_stream(set, states, 7).expect("stream");
    let spec = TrainSpec {
        epochs: 2,
        ..TrainSpec::default()
    };
    let plan = TrainingPlan {
        hidden: vec![64, 64],
        initial: spec,
        incremental: spec,
        lwf: Distillation::Off,
        seed: 7,
    };
    train_chain(set, &stream, &plan, Backbone::Ft, &mut AccessAudit::new(states)).expect("chain")
}
