//! MLP feature extractor with a linear classification head, trained by SGD.
//!
//! The extractor is a stack of dense ReLU layers; its last activation is the
//! feature vector `f_t(x)` handed to the head. With no hidden layers the
//! features are the inputs themselves. Gradients are computed analytically
//! for softmax cross-entropy plus an optional distillation term on the
//! past-class logits.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datahub::{ByteReader, StateView};
use crate::error::{Error, Result};
use crate::matrix::{affine, Matrix};
use crate::seed;

/// One dense layer; `weights` has shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn zeros_like(&self) -> Self {
        Self {
            weights: Matrix::zeros(self.weights.rows(), self.weights.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_dim: usize,
    layers: Vec<DenseLayer>,
    head_weights: Matrix,
    head_bias: Vec<f64>,
    state_index: usize,
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub features: Matrix,
    pub logits: Matrix,
}

/// Gradients laid out like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseLayer>,
    pub head_weights: Matrix,
    pub head_bias: Vec<f64>,
}

impl Gradients {
    /// Flat views in the same order as [`Model::parameters`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(l.weights.as_slice());
            out.push(l.bias.as_slice());
        }
        out.push(self.head_weights.as_slice());
        out.push(self.head_bias.as_slice());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub classification_loss: f64,
    pub distillation_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Distillation {
    #[default]
    Off,
    On {
        temperature: f64,
        weight: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    #[serde(default)]
    pub distillation: Distillation,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            plateau_patience: 5,
            plateau_factor: 0.1,
            distillation: Distillation::Off,
            seed: 0,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad("base_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.plateau_patience < 1 {
            return bad("plateau_patience must be at least 1");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if let Distillation::On { temperature, weight } = self.distillation {
            if !(temperature.is_finite() && temperature > 0.0) {
                return bad("distillation temperature must be positive");
            }
            if !(weight.is_finite() && weight >= 0.0) {
                return bad("distillation weight must be non-negative");
            }
        }
        Ok(())
    }
}

fn uniform_matrix(rows: usize, cols: usize, limit: f64, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..=limit)).collect();
    Matrix::new(rows, cols, data).expect("sized above")
}

impl Model {
    /// Fresh state-0 model. Hidden layers use He-uniform initialization,
    /// head rows are uniform in `±1/√d`; all biases start at zero.
    pub fn new(input_dim: usize, hidden: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 || hidden.contains(&0) {
            return Err(Error::Argument("model dimensions must all be positive".into()));
        }
        let mut rng = seed::rng(seed, "model-init", 0);
        let mut layers = Vec::with_capacity(hidden.len());
        let mut fan_in = input_dim;
        for &width in hidden {
            let limit = (6.0 / fan_in as f64).sqrt();
            layers.push(DenseLayer {
                weights: uniform_matrix(width, fan_in, limit, &mut rng),
                bias: vec![0.0; width],
            });
            fan_in = width;
        }
        let head_weights = uniform_matrix(num_classes, fan_in, 1.0 / (fan_in as f64).sqrt(), &mut rng);
        Ok(Self {
            input_dim,
            layers,
            head_weights,
            head_bias: vec![0.0; num_classes],
            state_index: 0,
        })
    }

    /// Assembles a model from explicit parameters.
    pub fn from_parts(
        input_dim: usize,
        layers: Vec<DenseLayer>,
        head_weights: Matrix,
        head_bias: Vec<f64>,
        state_index: usize,
    ) -> Result<Self> {
        let mut fan_in = input_dim;
        for (i, l) in layers.iter().enumerate() {
            if l.weights.cols() != fan_in || l.bias.len() != l.weights.rows() {
                return Err(Error::shape(
                    format!("layer {i} with {fan_in} inputs"),
                    format!(
                        "{}x{} weights, {} biases",
                        l.weights.rows(),
                        l.weights.cols(),
                        l.bias.len()
                    ),
                ));
            }
            fan_in = l.weights.rows();
        }
        if head_weights.cols() != fan_in || head_bias.len() != head_weights.rows() {
            return Err(Error::shape(
                format!("head over {fan_in} features"),
                format!(
                    "{}x{} weights, {} biases",
                    head_weights.rows(),
                    head_weights.cols(),
                    head_bias.len()
                ),
            ));
        }
        let model = Self {
            input_dim,
            layers,
            head_weights,
            head_bias,
            state_index,
        };
        if !model.is_finite() {
            return Err(Error::Numeric("model parameters must be finite".into()));
        }
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.head_weights.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.head_weights.rows()
    }

    pub fn state_index(&self) -> usize {
        self.state_index
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.weights.rows()).collect()
    }

    pub fn head_weights(&self) -> &Matrix {
        &self.head_weights
    }

    pub fn head_bias(&self) -> &[f64] {
        &self.head_bias
    }

    pub fn head_weights_mut(&mut self) -> &mut Matrix {
        &mut self.head_weights
    }

    pub fn head_bias_mut(&mut self) -> &mut [f64] {
        &mut self.head_bias
    }

    /// Flat parameter views: each layer's weights then bias, then the head.
    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(l.weights.as_slice());
            out.push(l.bias.as_slice());
        }
        out.push(self.head_weights.as_slice());
        out.push(self.head_bias.as_slice());
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(l.weights.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out.push(self.head_weights.as_mut_slice());
        out.push(self.head_bias.as_mut_slice());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.input_dim {
            return Err(Error::shape(
                format!("{} input columns", self.input_dim),
                format!("{} columns", batch.cols()),
            ));
        }
        Ok(())
    }

    /// Post-ReLU activations of every extractor layer; the last one is `f_t(x)`.
    fn activations(&self, batch: &Matrix) -> Result<Vec<Matrix>> {
        self.check_input(batch)?;
        let mut acts = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = acts.last().unwrap_or(batch);
            let mut a = affine(input, &layer.weights, &layer.bias)?;
            for v in a.as_mut_slice() {
                *v = v.max(0.0);
            }
            acts.push(a);
        }
        Ok(acts)
    }

    /// Extractor output `f_t(x)` only.
    pub fn features(&self, batch: &Matrix) -> Result<Matrix> {
        let mut acts = self.activations(batch)?;
        Ok(acts.pop().unwrap_or_else(|| batch.clone()))
    }

    pub fn forward(&self, batch: &Matrix) -> Result<Forward> {
        let features = self.features(batch)?;
        let logits = affine(&features, &self.head_weights, &self.head_bias)?;
        if !logits.is_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok(Forward { features, logits })
    }

    /// Index of the highest logit per row, lowest index on ties.
    pub fn predict(&self, batch: &Matrix) -> Result<Vec<usize>> {
        let logits = self.forward(batch)?.logits;
        Ok(logits.iter_rows().map(argmax).collect())
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let data = m.iter_rows().flat_map(softmax).collect();
    Matrix::new(m.rows(), m.cols(), data).expect("same shape")
}

/// Loss and exact gradients for one batch.
///
/// Classification loss is the batch mean of softmax cross-entropy over all
/// `N_t` outputs. With distillation on, the previous model's past-class
/// logits and the current ones are both divided by the temperature, and the
/// batch mean cross-entropy between the two softmaxes is added with the
/// configured weight.
pub fn loss_and_gradients(
    model: &Model,
    batch: &Matrix,
    targets: &[usize],
    previous: Option<&Model>,
    spec: &TrainSpec,
) -> Result<(LossBreakdown, Gradients)> {
    batch_step(model, batch, targets, previous, spec).map(|(loss, grads, _)| (loss, grads))
}

fn batch_step(
    model: &Model,
    batch: &Matrix,
    targets: &[usize],
    previous: Option<&Model>,
    spec: &TrainSpec,
) -> Result<(LossBreakdown, Gradients, Matrix)> {
    if batch.rows() != targets.len() || batch.rows() == 0 {
        return Err(Error::shape(
            format!("{} targets", batch.rows()),
            format!("{} targets", targets.len()),
        ));
    }
    let n_classes = model.num_classes();
    if let Some(&t) = targets.iter().find(|&&t| t >= n_classes) {
        return Err(Error::Argument(format!(
            "target {t} outside the {n_classes} classes of the head"
        )));
    }
    let distill = match (spec.distillation, previous) {
        (Distillation::Off, None) => None,
        (Distillation::On { temperature, weight }, Some(prev)) => {
            if prev.num_classes() > n_classes {
                return Err(Error::Config(
                    "previous model has more classes than the current one".into(),
                ));
            }
            Some((prev, temperature, weight))
        }
        (Distillation::On { .. }, None) => {
            return Err(Error::Config(
                "distillation requires a previous model and cannot run in state 0".into(),
            ))
        }
        (Distillation::Off, Some(_)) => {
            return Err(Error::Config("previous model supplied but distillation is off".into()))
        }
    };

    let acts = model.activations(batch)?;
    let features = acts.last().unwrap_or(batch);
    let logits = affine(features, &model.head_weights, &model.head_bias)?;
    let b = batch.rows() as f64;

    let mut dlogits = Matrix::zeros(logits.rows(), n_classes);
    let mut ce = 0.0;
    for (r, (row, &t)) in logits.iter_rows().zip(targets).enumerate() {
        ce += log_sum_exp(row) - row[t];
        let p = softmax(row);
        let dst = dlogits.row_mut(r);
        for (c, pc) in p.into_iter().enumerate() {
            dst[c] = pc / b;
        }
        dst[t] -= 1.0 / b;
    }
    ce /= b;

    let mut kd = 0.0;
    let mut kd_weight = 0.0;
    if let Some((prev, temperature, weight)) = distill {
        let prev_logits = prev.forward(batch)?.logits;
        let past = prev.num_classes();
        kd_weight = weight;
        for r in 0..logits.rows() {
            let soft_cur: Vec<f64> = logits.row(r)[..past].iter().map(|v| v / temperature).collect();
            let soft_prev: Vec<f64> = prev_logits.row(r).iter().map(|v| v / temperature).collect();
            let q = softmax(&soft_prev);
            let lse = log_sum_exp(&soft_cur);
            let s = softmax(&soft_cur);
            kd += q.iter().zip(&soft_cur).map(|(qi, zi)| -qi * (zi - lse)).sum::<f64>();
            let dst = &mut dlogits.row_mut(r)[..past];
            for c in 0..past {
                dst[c] += weight * (s[c] - q[c]) / (temperature * b);
            }
        }
        kd /= b;
    }

    let mut grads = Gradients {
        layers: model.layers.iter().map(DenseLayer::zeros_like).collect(),
        head_weights: Matrix::zeros(n_classes, model.feature_dim()),
        head_bias: vec![0.0; n_classes],
    };
    accumulate_layer_grads(&dlogits, features, &mut grads.head_weights, &mut grads.head_bias);
    let mut upstream = backprop_input(&dlogits, &model.head_weights);

    for li in (0..model.layers.len()).rev() {
        let post = &acts[li];
        for (g, &a) in upstream.as_mut_slice().iter_mut().zip(post.as_slice()) {
            if a <= 0.0 {
                *g = 0.0;
            }
        }
        let input = if li == 0 { batch } else { &acts[li - 1] };
        let layer_grads = &mut grads.layers[li];
        accumulate_layer_grads(&upstream, input, &mut layer_grads.weights, &mut layer_grads.bias);
        if li > 0 {
            upstream = backprop_input(&upstream, &model.layers[li].weights);
        }
    }

    let breakdown = LossBreakdown {
        classification_loss: ce,
        distillation_loss: kd,
        total: ce + kd_weight * kd,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric("non-finite training loss".into()));
    }
    Ok((breakdown, grads, logits))
}

/// `dW += deltaᵀ · input`, `db += Σ_rows delta`.
fn accumulate_layer_grads(delta: &Matrix, input: &Matrix, dw: &mut Matrix, db: &mut [f64]) {
    for r in 0..delta.rows() {
        let d = delta.row(r);
        let x = input.row(r);
        for (o, &g) in d.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            for (w, &xi) in dw.row_mut(o).iter_mut().zip(x) {
                *w += g * xi;
            }
        }
    }
}

/// `delta · weights`, the gradient with respect to the layer input.
fn backprop_input(delta: &Matrix, weights: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(delta.rows(), weights.cols());
    for r in 0..delta.rows() {
        let d = delta.row(r);
        let dst = out.row_mut(r);
        for (o, &g) in d.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (acc, &w) in dst.iter_mut().zip(weights.row(o)) {
                *acc += g * w;
            }
        }
    }
    out
}

/// SGD with momentum and L2 weight decay: `v ← μv + g + λθ`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &Model, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: model.parameters().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients, lr: f64) {
        let grads = grads.slices();
        for ((param, grad), vel) in model.parameters_mut().into_iter().zip(grads).zip(&mut self.velocity) {
            for ((p, &g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
                *v = self.momentum * *v + g + self.weight_decay * *p;
                *p -= lr * *v;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<EpochRecord>,
}

/// Learning rate at the start of state `t`: `base_lr` for state 0, `base_lr / t` afterwards.
pub fn initial_lr(base_lr: f64, state: usize) -> f64 {
    if state == 0 {
        base_lr
    } else {
        base_lr / state as f64
    }
}

/// Trains `model` on one state's view.
///
/// The training error tracked for the plateau schedule is the epoch's mean
/// total loss; the learning rate is multiplied by `plateau_factor` once it
/// has failed to improve for `plateau_patience` consecutive epochs.
pub fn train_state(model: Model, view: &StateView, spec: &TrainSpec, previous: Option<&Model>) -> Result<TrainOutcome> {
    spec.validate()?;
    if view.is_empty() {
        return Err(Error::Training(format!("state {} has no training samples", view.state)));
    }
    let mut model = model;
    let state = model.state_index;
    let mut lr = initial_lr(spec.base_lr, state);
    let mut opt = Sgd::new(&model, spec.momentum, spec.weight_decay);
    let mut rng = seed::rng(spec.seed, "minibatch-order", state as u64);
    let mut order: Vec<usize> = (0..view.len()).collect();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut trace = Vec::with_capacity(spec.epochs);

    for epoch in 0..spec.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(spec.batch_size) {
            let batch = view.features.select_rows(chunk);
            let targets: Vec<usize> = chunk.iter().map(|&i| view.targets[i]).collect();
            // Accuracy is read off the pre-update logits of the same batch.
            let (loss, grads, logits) = batch_step(&model, &batch, &targets, previous, spec)?;
            correct += logits
                .iter_rows()
                .zip(&targets)
                .filter(|(row, &t)| argmax(row) == t)
                .count();
            loss_sum += loss.total * chunk.len() as f64;
            opt.step(&mut model, &grads, lr);
        }
        if !model.is_finite() {
            return Err(Error::Numeric(format!(
                "parameters diverged in state {state}, epoch {epoch}"
            )));
        }
        let loss = loss_sum / view.len() as f64;
        trace.push(EpochRecord {
            epoch,
            lr,
            loss,
            accuracy: 100.0 * correct as f64 / view.len() as f64,
        });
        if loss < best {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= spec.plateau_patience {
                lr *= spec.plateau_factor;
                stale = 0;
            }
        }
    }
    Ok(TrainOutcome { model, trace })
}

/// Copy of `model` with `n_new` extra head rows for the next state.
///
/// Existing parameters are copied verbatim; new rows are uniform in
/// `±1/√d` with zero bias.
pub fn extend_head(model: &Model, n_new: usize, seed: u64) -> Result<Model> {
    if n_new == 0 {
        return Err(Error::Argument("extend_head needs at least one new class".into()));
    }
    let next_state = model.state_index + 1;
    let d = model.feature_dim();
    let mut rng = seed::rng(seed, "head-extension", next_state as u64);
    let rows = uniform_matrix(n_new, d, 1.0 / (d as f64).sqrt(), &mut rng);
    let mut extended = model.clone();
    extended.head_weights.append_rows(&rows)?;
    extended.head_bias.extend(std::iter::repeat_n(0.0, n_new));
    extended.state_index = next_state;
    Ok(extended)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SIWM";
const CHECKPOINT_VERSION: u32 = 1;

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Model {
    /// Versioned little-endian dump of every parameter tensor, followed by a
    /// SHA-256 of the preceding bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u64(&mut out, self.state_index);
        put_u64(&mut out, self.input_dim);
        put_u64(&mut out, self.layers.len());
        for l in &self.layers {
            put_u64(&mut out, l.weights.rows());
            put_u64(&mut out, l.weights.cols());
            put_f64s(&mut out, l.weights.as_slice());
            put_f64s(&mut out, &l.bias);
        }
        put_u64(&mut out, self.head_weights.rows());
        put_u64(&mut out, self.head_weights.cols());
        put_f64s(&mut out, self.head_weights.as_slice());
        put_f64s(&mut out, &self.head_bias);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 40 {
            return Err(Error::Format("checkpoint too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checkpoint digest mismatch".into()));
        }
        let mut r = ByteReader::new(body);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a model checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let state_index = r.len()?;
        let input_dim = r.len()?;
        let n_layers = r.len()?;
        let mut layers = Vec::new();
        for _ in 0..n_layers {
            let rows = r.len()?;
            let cols = r.len()?;
            let weights = Matrix::new(rows, cols, r.f64_vec(rows * cols)?)?;
            let bias = r.f64_vec(rows)?;
            layers.push(DenseLayer { weights, bias });
        }
        let rows = r.len()?;
        let cols = r.len()?;
        let head_weights = Matrix::new(rows, cols, r.f64_vec(rows * cols)?)?;
        let head_bias = r.f64_vec(rows)?;
        if r.remaining() != 0 {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Model::from_parts(input_dim, layers, head_weights, head_bias, state_index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_view(features: Matrix, targets: Vec<usize>) -> StateView {
        let n = targets.len();
        StateView {
            state: 0,
            features,
            targets,
            sample_indices: (0..n).collect(),
        }
    }

    #[test]
    fn zero_parameters_give_bias_logits() {
        let layers = vec![DenseLayer {
            weights: Matrix::zeros(4, 3),
            bias: vec![0.0; 4],
        }];
        let model = Model::from_parts(3, layers, Matrix::zeros(2, 4), vec![0.5, -1.5], 0).unwrap();
        let batch = Matrix::from_rows(&[[1.0, 2.0, 3.0], [-4.0, 0.5, 9.0]]).unwrap();
        let out = model.forward(&batch).unwrap();
        for row in out.logits.iter_rows() {
            assert_eq!(row, &[0.5, -1.5]);
        }
    }

    #[test]
    fn identity_head_reproduces_inputs() {
        let model = Model::from_parts(3, vec![], Matrix::identity(3), vec![0.0; 3], 0).unwrap();
        let batch = Matrix::from_rows(&[[1.0, -2.0, 3.5]]).unwrap();
        assert_eq!(model.forward(&batch).unwrap().logits, batch);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let model = Model::new(3, &[4], 2, 0).unwrap();
        assert!(matches!(model.forward(&Matrix::zeros(1, 2)), Err(Error::Shape { .. })));
    }

    #[test]
    fn uniform_logits_cost_ln2() {
        let model = Model::from_parts(2, vec![], Matrix::zeros(2, 2), vec![0.0; 2], 0).unwrap();
        let batch = Matrix::from_rows(&[[0.3, 0.7]]).unwrap();
        let (loss, _) = loss_and_gradients(&model, &batch, &[1], None, &TrainSpec::default()).unwrap();
        assert!((loss.classification_loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(loss.distillation_loss, 0.0);
        assert_eq!(loss.total, loss.classification_loss);
    }

    #[test]
    fn distillation_configuration_errors() {
        let model = Model::new(2, &[3], 2, 1).unwrap();
        let batch = Matrix::from_rows(&[[0.3, 0.7]]).unwrap();
        let spec = TrainSpec {
            distillation: Distillation::On {
                temperature: 2.0,
                weight: 1.0,
            },
            ..TrainSpec::default()
        };
        assert!(matches!(
            loss_and_gradients(&model, &batch, &[0], None, &spec),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            loss_and_gradients(&model, &batch, &[0], Some(&model), &TrainSpec::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn target_out_of_range() {
        let model = Model::new(2, &[], 2, 1).unwrap();
        let batch = Matrix::from_rows(&[[0.3, 0.7]]).unwrap();
        assert!(loss_and_gradients(&model, &batch, &[2], None, &TrainSpec::default()).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(TrainSpec {
            epochs: 0,
            ..TrainSpec::default()
        }
        .validate()
        .is_err());
        assert!(TrainSpec {
            batch_size: 0,
            ..TrainSpec::default()
        }
        .validate()
        .is_err());
        assert!(TrainSpec {
            momentum: 1.0,
            ..TrainSpec::default()
        }
        .validate()
        .is_err());
        assert!(TrainSpec {
            plateau_factor: 1.0,
            ..TrainSpec::default()
        }
        .validate()
        .is_err());
        assert!(TrainSpec::default().validate().is_ok());
    }

    #[test]
    fn empty_view_is_a_training_error() {
        let model = Model::new(2, &[], 2, 1).unwrap();
        let view = tiny_view(Matrix::zeros(0, 2), vec![]);
        assert!(matches!(
            train_state(model, &view, &TrainSpec::default(), None),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn incremental_lr_schedule() {
        assert_eq!(initial_lr(0.1, 0), 0.1);
        assert_eq!(initial_lr(0.1, 1), 0.1);
        assert!((initial_lr(0.1, 4) - 0.025).abs() < 1e-18);
    }

    #[test]
    fn plateau_divides_lr() {
        // A constant-loss problem never improves after the first epoch.
        let model = Model::from_parts(1, vec![], Matrix::zeros(1, 1), vec![0.0], 0).unwrap();
        let view = tiny_view(Matrix::from_rows(&[[0.0], [0.0]]).unwrap(), vec![0, 0]);
        let spec = TrainSpec {
            epochs: 7,
            plateau_patience: 3,
            weight_decay: 0.0,
            ..TrainSpec::default()
        };
        let out = train_state(model, &view, &spec, None).unwrap();
        let lrs: Vec<f64> = out.trace.iter().map(|r| r.lr).collect();
        assert_eq!(lrs[..4], [0.1; 4]);
        assert!((lrs[4] - 0.01).abs() < 1e-15);
        assert!((lrs[6] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn extension_preserves_old_rows() {
        let model = Model::new(3, &[5], 4, 2).unwrap();
        assert!(extend_head(&model, 0, 1).is_err());
        let ext = extend_head(&model, 3, 1).unwrap();
        assert_eq!(ext.num_classes(), 7);
        assert_eq!(ext.state_index(), 1);
        for r in 0..4 {
            assert_eq!(ext.head_weights().row(r), model.head_weights().row(r));
        }
        assert_eq!(&ext.head_bias()[..4], model.head_bias());
        assert_eq!(ext.layers(), model.layers());
        let limit = 1.0 / 5f64.sqrt();
        assert!(ext.head_weights().as_slice()[20..].iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let model = Model::new(3, &[5, 4], 6, 9).unwrap();
        let bytes = model.to_bytes();
        assert_eq!(Model::from_bytes(&bytes).unwrap(), model);
        let mut bad = bytes.clone();
        bad[30] ^= 1;
        assert!(matches!(Model::from_bytes(&bad), Err(Error::Integrity(_))));
    }
}
