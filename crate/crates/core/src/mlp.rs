//! The pooled congestion function: a small fully-connected network mapping
//! feature vectors to inverse speed.
//!
//! Hidden layers use ELU (alpha = 1), the output a sigmoid, and training
//! minimizes the mean squared error in inverse-speed space with Adam. The
//! forward and backward passes are written out by hand over row-major
//! weight matrices.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{RoadPriority, MAX_SPEED_MPS, MIN_SPEED_MPS};
use crate::error::{Error, Result};
use crate::features::{
    feature_fingerprint, normalize_into, FeatureVector, NormStats, TrainingExample, FEATURE_NAMES,
    N_FEATURES,
};

pub const LAYER_SIZES: [usize; 7] = [N_FEATURES, 16, 8, 4, 8, 16, 1];
pub const SCHEMA_VERSION: u32 = 1;

/// Largest double below 1; keeps the network output strictly inside (0, 1).
const OUTPUT_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

pub fn elu(z: f64) -> f64 {
    if z >= 0.0 {
        z
    } else {
        z.exp_m1()
    }
}

/// Derivative of ELU given the pre-activation.
fn elu_prime(z: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        z.exp()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Squared error between predicted and observed inverse speed.
pub fn loss(predicted_inv_speed: f64, speed_mps: f64) -> Result<f64> {
    if !(predicted_inv_speed > 0.0 && predicted_inv_speed < 1.0) || !(speed_mps > MIN_SPEED_MPS) {
        return Err(Error::Precondition(format!(
            "loss needs prediction in (0, 1) and speed > 1 m/s, got {predicted_inv_speed} / {speed_mps}"
        )));
    }
    let r = predicted_inv_speed - 1.0 / speed_mps;
    Ok(r * r)
}

/// `1 / y`, clamped to the filtered speed range.
pub fn speed_from_output(y: f64) -> f64 {
    (1.0 / y).clamp(MIN_SPEED_MPS, MAX_SPEED_MPS)
}

/// Fully-connected layer; `weights` is row-major `[outputs][inputs]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn glorot(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let mut d = Dense::zeros(inputs, outputs);
        for w in &mut d.weights {
            *w = rng.random_range(-limit..limit);
        }
        d
    }

    fn apply(&self, x: &[f64], z: &mut [f64]) {
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            *zo = self.biases[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpModel {
    pub schema_version: u32,
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<Dense>,
    pub norm: NormStats,
    pub feature_names: Vec<String>,
    pub feature_fingerprint: String,
    pub seed: u64,
    #[serde(default)]
    pub city: Option<String>,
    #[serde(default)]
    pub priority: Option<RoadPriority>,
}

/// Gradients shaped like the model's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    fn zeros_like(m: &MlpModel) -> Self {
        Gradients {
            layers: m
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    fn clear(&mut self) {
        for l in &mut self.layers {
            l.weights.fill(0.0);
            l.biases.fill(0.0);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }
}

/// Per-sample activation buffers reused across a batch.
struct Scratch {
    input: Vec<f64>,
    z: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

impl Scratch {
    fn new(sizes: &[usize]) -> Self {
        let layers = &sizes[1..];
        Scratch {
            input: vec![0.0; sizes[0]],
            z: layers.iter().map(|&n| vec![0.0; n]).collect(),
            a: layers.iter().map(|&n| vec![0.0; n]).collect(),
            delta: layers.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

impl MlpModel {
    /// Glorot-uniform weights, zero biases.
    pub fn init(seed: u64, norm: NormStats) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(&mut rng, seed, norm)
    }

    fn init_with(rng: &mut impl Rng, seed: u64, norm: NormStats) -> Self {
        let layers = LAYER_SIZES
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], rng))
            .collect();
        MlpModel {
            schema_version: SCHEMA_VERSION,
            layer_sizes: LAYER_SIZES.to_vec(),
            layers,
            norm,
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            feature_fingerprint: feature_fingerprint(),
            seed,
            city: None,
            priority: None,
        }
    }

    /// All weights and biases zero; the output is 0.5 for every input.
    pub fn zeros(norm: NormStats) -> Self {
        let mut m = Self::init(0, norm);
        for l in &mut m.layers {
            l.weights.fill(0.0);
            l.biases.fill(0.0);
        }
        m
    }

    pub fn with_origin(mut self, city: &str, priority: RoadPriority) -> Self {
        self.city = Some(city.to_string());
        self.priority = Some(priority);
        self
    }

    /// Checks the schema, layer shapes, and feature layout.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "model schema version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.feature_fingerprint != feature_fingerprint()
            || self.feature_names.iter().map(String::as_str).ne(FEATURE_NAMES)
        {
            return Err(Error::LayoutMismatch(format!(
                "model expects features [{}]",
                self.feature_names.join(",")
            )));
        }
        if self.layer_sizes != LAYER_SIZES || self.layers.len() != LAYER_SIZES.len() - 1 {
            return Err(Error::LayoutMismatch(format!(
                "unexpected layer sizes {:?}",
                self.layer_sizes
            )));
        }
        for (l, w) in self.layers.iter().zip(LAYER_SIZES.windows(2)) {
            if l.inputs != w[0]
                || l.outputs != w[1]
                || l.weights.len() != w[0] * w[1]
                || l.biases.len() != w[1]
            {
                return Err(Error::LayoutMismatch(format!(
                    "layer {}x{} has inconsistent shape",
                    l.inputs, l.outputs
                )));
            }
        }
        self.norm.validate()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Weights then biases, layer by layer.
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count(), "parameter count mismatch");
        let mut it = params.iter();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.biases.iter_mut()) {
                *w = *it.next().expect("length checked");
            }
        }
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    /// Forward pass over an already-normalized input; fills `s.z` / `s.a`.
    fn propagate(&self, s: &mut Scratch) -> f64 {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (before, after) = s.a.split_at_mut(i);
            let x: &[f64] = if i == 0 { &s.input } else { &before[i - 1] };
            layer.apply(x, &mut s.z[i]);
            let act = &mut after[0];
            if i == last {
                act[0] = sigmoid(s.z[i][0]);
            } else {
                for (a, &z) in act.iter_mut().zip(&s.z[i]) {
                    *a = elu(z);
                }
            }
        }
        s.a[last][0].clamp(f64::MIN_POSITIVE, OUTPUT_CEIL)
    }

    fn forward_normalized(&self, z: &[f64], s: &mut Scratch) -> f64 {
        s.input.copy_from_slice(z);
        self.propagate(s)
    }

    /// Network output in `(0, 1)`: the predicted inverse speed.
    pub fn forward(&self, x: &FeatureVector) -> f64 {
        let mut s = Scratch::new(&self.layer_sizes);
        normalize_into(&x.0, &self.norm, &mut s.input);
        self.propagate(&mut s)
    }

    pub fn forward_raw(&self, x: &[f64]) -> Result<f64> {
        let fv: [f64; N_FEATURES] = x.try_into().map_err(|_| {
            Error::LayoutMismatch(format!("expected {N_FEATURES} features, got {}", x.len()))
        })?;
        Ok(self.forward(&FeatureVector(fv)))
    }

    pub fn forward_batch(&self, xs: &[FeatureVector]) -> Vec<f64> {
        let mut s = Scratch::new(&self.layer_sizes);
        xs.iter()
            .map(|x| {
                normalize_into(&x.0, &self.norm, &mut s.input);
                self.propagate(&mut s)
            })
            .collect()
    }

    pub fn predict_speed(&self, x: &FeatureVector) -> f64 {
        speed_from_output(self.forward(x))
    }

    /// Mean squared inverse-speed error over a normalized batch; gradients
    /// of that mean are written into `grads`.
    fn loss_and_grad(
        &self,
        inputs: &[[f64; N_FEATURES]],
        labels: &[f64],
        grads: &mut Gradients,
        s: &mut Scratch,
    ) -> f64 {
        grads.clear();
        let n = inputs.len() as f64;
        let last = self.layers.len() - 1;
        let mut total = 0.0;
        for (x, &y) in inputs.iter().zip(labels) {
            s.input.copy_from_slice(x);
            self.propagate(s);
            let out = s.a[last][0];
            let r = out - y;
            total += r * r;
            s.delta[last][0] = 2.0 * r / n * out * (1.0 - out);
            for i in (0..=last).rev() {
                if i < last {
                    let next = &self.layers[i + 1];
                    let (cur, rest) = s.delta.split_at_mut(i + 1);
                    let upstream = &rest[0];
                    for (j, d) in cur[i].iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (o, u) in upstream.iter().enumerate() {
                            acc += next.weights[o * next.inputs + j] * u;
                        }
                        *d = acc * elu_prime(s.z[i][j]);
                    }
                }
                let x_in: &[f64] = if i == 0 { &s.input } else { &s.a[i - 1] };
                let g = &mut grads.layers[i];
                for (o, &d) in s.delta[i].iter().enumerate() {
                    g.biases[o] += d;
                    let row = &mut g.weights[o * g.inputs..(o + 1) * g.inputs];
                    for (w, v) in row.iter_mut().zip(x_in) {
                        *w += d * v;
                    }
                }
            }
        }
        total / n
    }

    fn normalized_inputs(&self, batch: &[TrainingExample]) -> (Vec<[f64; N_FEATURES]>, Vec<f64>) {
        batch
            .iter()
            .map(|e| {
                let mut z = [0.0; N_FEATURES];
                normalize_into(&e.x.0, &self.norm, &mut z);
                (z, e.label_inv_speed)
            })
            .unzip()
    }

    /// Mean batch loss and its exact gradient with respect to every weight
    /// and bias.
    pub fn backward(&self, batch: &[TrainingExample]) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset("backward on an empty batch".into()));
        }
        let (inputs, labels) = self.normalized_inputs(batch);
        let mut grads = Gradients::zeros_like(self);
        let mut s = Scratch::new(&self.layer_sizes);
        let l = self.loss_and_grad(&inputs, &labels, &mut grads, &mut s);
        Ok((l, grads))
    }

    /// Mean inverse-speed squared error over a set of examples.
    pub fn mean_loss(&self, examples: &[TrainingExample]) -> f64 {
        let mut s = Scratch::new(&self.layer_sizes);
        let mut z = [0.0; N_FEATURES];
        let total: f64 = examples
            .iter()
            .map(|e| {
                normalize_into(&e.x.0, &self.norm, &mut z);
                let r = self.forward_normalized(&z, &mut s) - e.label_inv_speed;
                r * r
            })
            .sum();
        total / examples.len() as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: MlpModel =
            serde_json::from_str(s).map_err(|e| Error::Format(format!("model JSON: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: MlpModel = serde_json::from_str(&s).map_err(|e| Error::json(path, e))?;
        m.validate()?;
        Ok(m)
    }
}

fn default_batch_size() -> usize {
    256
}
fn default_epochs() -> usize {
    30
}
fn default_shuffle_buffer() -> usize {
    10_000
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Recorded for completeness; every epoch is a full seeded permutation,
    /// which needs the whole training set in memory.
    #[serde(default = "default_shuffle_buffer")]
    pub shuffle_buffer: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            shuffle_buffer: default_shuffle_buffer(),
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 || self.epochs < 1 || self.shuffle_buffer < 1 {
            return Err(Error::InvalidConfig(
                "batch_size, epochs and shuffle_buffer must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon > 0.0)
        {
            return Err(Error::InvalidConfig("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    /// `None` when no validation examples were supplied.
    pub val_loss: Vec<Option<f64>>,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }

    /// Final-epoch training loss is no worse than the first epoch's.
    pub fn improved(&self) -> bool {
        match (self.train_loss.first(), self.train_loss.last()) {
            (Some(a), Some(b)) => b <= a,
            _ => true,
        }
    }

    pub fn final_val_loss(&self) -> Option<f64> {
        self.val_loss.last().copied().flatten()
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, model: &mut MlpModel, grads: &Gradients, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let g_iter = grads
            .layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases));
        for (((p, g), m), v) in model
            .params_mut()
            .zip(g_iter)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// Fits normalization on `train`, then runs `cfg.epochs` passes of Adam over
/// seeded mini-batches. Deterministic in `(cfg.seed, train, val)`.
pub fn train(
    train: &[TrainingExample],
    val: &[TrainingExample],
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainHistory)> {
    cfg.validate()?;
    let norm = crate::features::fit_norm_stats(train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MlpModel::init_with(&mut rng, cfg.seed, norm);
    let (inputs, labels) = model.normalized_inputs(train);

    let mut grads = Gradients::zeros_like(&model);
    let mut scratch = Scratch::new(&model.layer_sizes);
    let mut adam = Adam::new(model.param_count());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch_x = Vec::with_capacity(cfg.batch_size);
    let mut batch_y = Vec::with_capacity(cfg.batch_size);
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            batch_x.clear();
            batch_y.clear();
            batch_x.extend(chunk.iter().map(|&i| inputs[i]));
            batch_y.extend(chunk.iter().map(|&i| labels[i]));
            let l = model.loss_and_grad(&batch_x, &batch_y, &mut grads, &mut scratch);
            if !l.is_finite() || grads.layers.iter().any(|g| g.weights.iter().any(|w| !w.is_finite())) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            adam.step(&mut model, &grads, cfg);
            epoch_total += l * chunk.len() as f64;
        }
        history.train_loss.push(epoch_total / train.len() as f64);
        let v = (!val.is_empty()).then(|| model.mean_loss(val));
        history.val_loss.push(v);
        log::debug!(
            "epoch {epoch}: train {:.6e} val {:?}",
            history.train_loss[epoch],
            v
        );
    }
    if !history.improved() {
        log::warn!("training loss did not improve over {} epochs", cfg.epochs);
    }
    Ok((model, history))
}
