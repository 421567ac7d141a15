use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use siw_core::datahub::{generate_corpus, partition_stream, state_training_view, StateView};
use siw_core::neuralnet::{loss_and_gradients, softmax, softmax_rows, train_state, Sgd};
use siw_core::seed;
use siw_core::{AccessAudit, Distillation, Matrix, Model, SyntheticSpec, TrainSpec};

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// Model with nonzero biases so every parameter receives gradient.
fn jittered_model(d: usize, hidden: &[usize], classes: usize, s: u64) -> Model {
    let mut m = Model::new(d, hidden, classes, s).unwrap();
    let mut rng = seed::rng(s, "jitter", 0);
    for p in m.parameters_mut() {
        for v in p.iter_mut() {
            *v += 0.1 * rng.random_range(-1.0..1.0);
        }
    }
    m
}

fn total_loss(model: &Model, batch: &Matrix, targets: &[usize], previous: Option<&Model>, spec: &TrainSpec) -> f64 {
    loss_and_gradients(model, batch, targets, previous, spec)
        .unwrap()
        .0
        .total
}

/// Largest relative error between analytic and central-difference gradients.
/// Entries where both are below 1e-6 are compared with that floor as denominator.
fn gradient_check(instance: u64, distill: bool) -> f64 {
    let mut rng = seed::rng(instance, "gradcheck", distill as u64);
    let (d, hidden, classes, past) = (5, [7, 6], 6, 4);
    let model = jittered_model(d, &hidden, classes, instance);
    let previous = jittered_model(d, &hidden, past, instance + 1000);
    let batch = random_matrix(8, d, &mut rng);
    let targets: Vec<usize> = (0..8).map(|_| rng.random_range(0..classes)).collect();
    let spec = TrainSpec {
        distillation: if distill {
            Distillation::On {
                temperature: 2.0,
                weight: 0.7,
            }
        } else {
            Distillation::Off
        },
        ..TrainSpec::default()
    };
    let prev = distill.then_some(&previous);
    let (_, grads) = loss_and_gradients(&model, &batch, &targets, prev, &spec).unwrap();
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for (pi, g) in analytic.iter().enumerate() {
        for (i, &a) in g.iter().enumerate() {
            let original = probe.parameters()[pi][i];
            probe.parameters_mut()[pi][i] = original + h;
            let up = total_loss(&probe, &batch, &targets, prev, &spec);
            probe.parameters_mut()[pi][i] = original - h;
            let down = total_loss(&probe, &batch, &targets, prev, &spec);
            probe.parameters_mut()[pi][i] = original;
            let numeric = (up - down) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn gradients_match_central_differences() {
    for instance in 0..12 {
        let err = gradient_check(instance, false);
        assert!(err < 1e-4, "instance {instance}: relative error {err:e}");
    }
}

#[test]
fn distillation_gradients_match_central_differences() {
    for instance in 100..112 {
        let err = gradient_check(instance, true);
        assert!(err < 1e-4, "instance {instance}: relative error {err:e}");
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = seed::rng(1, "softmax", 0);
    let m = random_matrix(50, 13, &mut rng);
    let scaled = Matrix::new(50, 13, m.as_slice().iter().map(|v| v * 300.0).collect()).unwrap();
    for row in softmax_rows(&scaled).iter_rows() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
    }
    let p = softmax(&[1000.0, 1000.0]);
    assert_eq!(p, vec![0.5, 0.5]);
}

#[test]
fn forward_matches_hand_rolled_oracle() {
    let model = jittered_model(6, &[9, 5], 4, 21);
    let mut rng = seed::rng(21, "oracle", 0);
    let batch = random_matrix(10, 6, &mut rng);
    let logits = model.forward(&batch).unwrap().logits;
    for r in 0..batch.rows() {
        let mut x = batch.row(r).to_vec();
        for layer in model.layers() {
            let mut y = vec![0.0; layer.weights.rows()];
            for (o, yo) in y.iter_mut().enumerate() {
                let mut acc = layer.bias[o];
                for (i, xi) in x.iter().enumerate() {
                    acc += layer.weights.get(o, i) * xi;
                }
                *yo = if acc > 0.0 { acc } else { 0.0 };
            }
            x = y;
        }
        for c in 0..model.num_classes() {
            let mut z = model.head_bias()[c];
            for (i, xi) in x.iter().enumerate() {
                z += model.head_weights().get(c, i) * xi;
            }
            assert!((z - logits.get(r, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn weight_decay_equals_explicit_l2_gradient() {
    let model = jittered_model(4, &[5], 3, 8);
    let mut rng = seed::rng(8, "wd", 0);
    let batch = random_matrix(6, 4, &mut rng);
    let targets = [0, 1, 2, 0, 1, 2];
    let spec = TrainSpec::default();
    let (_, grads) = loss_and_gradients(&model, &batch, &targets, None, &spec).unwrap();
    let lambda = 5e-3;
    let lr = 0.1;

    let mut decayed = model.clone();
    Sgd::new(&model, 0.0, lambda).step(&mut decayed, &grads, lr);

    let mut explicit = grads.clone();
    for (g, p) in explicit
        .head_weights
        .as_mut_slice()
        .iter_mut()
        .zip(model.head_weights().as_slice())
    {
        *g += lambda * p;
    }
    for (g, p) in explicit.head_bias.iter_mut().zip(model.head_bias()) {
        *g += lambda * p;
    }
    for (gl, ml) in explicit.layers.iter_mut().zip(model.layers()) {
        for (g, p) in gl.weights.as_mut_slice().iter_mut().zip(ml.weights.as_slice()) {
            *g += lambda * p;
        }
        for (g, p) in gl.bias.iter_mut().zip(&ml.bias) {
            *g += lambda * p;
        }
    }
    let mut plain = model.clone();
    Sgd::new(&model, 0.0, 0.0).step(&mut plain, &explicit, lr);

    for (a, b) in decayed.parameters().iter().zip(plain.parameters()) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}

fn two_blobs() -> StateView {
    let mut rng = seed::rng(2, "blobs", 0);
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for i in 0..80 {
        let c = i % 2;
        let centre = if c == 0 { -3.0 } else { 3.0 };
        let noise: f64 = StandardNormal.sample(&mut rng);
        let other: f64 = StandardNormal.sample(&mut rng);
        rows.push(vec![centre + 0.3 * noise, 0.3 * other]);
        targets.push(c);
    }
    StateView {
        state: 0,
        features: Matrix::from_rows(&rows).unwrap(),
        targets,
        sample_indices: (0..80).collect(),
    }
}

#[test]
fn separable_two_class_problem_is_learned() {
    let view = two_blobs();
    let spec = TrainSpec {
        epochs: 20,
        batch_size: 16,
        ..TrainSpec::default()
    };
    let out = train_state(Model::new(2, &[8], 2, 4).unwrap(), &view, &spec, None).unwrap();
    let pred = out.model.predict(&view.features).unwrap();
    assert_eq!(pred, view.targets);
    assert_eq!(out.trace.last().unwrap().accuracy, 100.0);
}

#[test]
fn training_is_deterministic() {
    let view = two_blobs();
    let spec = TrainSpec {
        epochs: 5,
        batch_size: 7,
        seed: 11,
        ..TrainSpec::default()
    };
    let a = train_state(Model::new(2, &[8, 4], 2, 4).unwrap(), &view, &spec, None).unwrap();
    let b = train_state(Model::new(2, &[8, 4], 2, 4).unwrap(), &view, &spec, None).unwrap();
    assert_eq!(a.model.to_bytes(), b.model.to_bytes());
    assert_eq!(a.trace, b.trace);
    let c = train_state(
        Model::new(2, &[8, 4], 2, 4).unwrap(),
        &view,
        &TrainSpec { seed: 12, ..spec },
        None,
    )
    .unwrap();
    assert_ne!(a.model.to_bytes(), c.model.to_bytes());
}

#[test]
fn tight_classes_are_linearly_separable() {
    let corpus = generate_corpus(
        &SyntheticSpec {
            num_classes: 20,
            samples_per_class: 30,
            dim: 16,
            spread: 0.01,
            seed: 5,
        },
        10,
    )
    .unwrap();
    let stream = partition_stream(&corpus.train, 1, 5).unwrap();
    let view = state_training_view(&stream, &corpus.train, 0, &mut AccessAudit::new(1)).unwrap();
    let spec = TrainSpec {
        epochs: 30,
        base_lr: 0.05,
        ..TrainSpec::default()
    };
    let model = train_state(Model::new(16, &[], 20, 5).unwrap(), &view, &spec, None)
        .unwrap()
        .model;
    let pred = model.predict(corpus.test.features()).unwrap();
    let correct = pred
        .iter()
        .zip(corpus.test.labels())
        .filter(|(p, l)| stream.label_of(**p) == **l)
        .count();
    assert!(correct as f64 / pred.len() as f64 >= 0.99, "{correct}/{}", pred.len());
}

#[test]
fn state_views_partition_the_training_set() {
    let corpus = generate_corpus(
        &SyntheticSpec {
            num_classes: 12,
            samples_per_class: 9,
            dim: 3,
            spread: 1.0,
            seed: 2,
        },
        3,
    )
    .unwrap();
    let stream = partition_stream(&corpus.train, 4, 2).unwrap();
    let mut audit = AccessAudit::new(4);
    let mut seen: Vec<usize> = (0..4)
        .flat_map(|t| {
            state_training_view(&stream, &corpus.train, t, &mut audit)
                .unwrap()
                .sample_indices
        })
        .collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..corpus.train.len()).collect::<Vec<_>>());
    assert!(audit.is_memoryless());
    assert_eq!(audit.total_reads(), corpus.train.len() as u64);
}
