//! A small feedforward ReLU classifier with an explicit last layer.
//!
//! The network is a stack of hidden ReLU layers followed by one linear
//! layer: logits a = g(x)^T W, where g(x) is the hidden stack's output with
//! a constant-1 feature appended. The appended feature folds the last-layer
//! bias into W, so "the last-layer parameters" is exactly the single matrix
//! W of shape (feature_dim x K) and nothing else. Curvature, jackknife, and
//! predictor all differentiate with respect to W only.
//!
//! Flattening order: W is laid out feature-major, class-minor. The entry for
//! feature f and class k lives at flat index f * K + k, and every module
//! that touches flattened last-layer quantities goes through [`flat_index`].
//!
//! Training runs plain mini-batch Adam over shuffled epochs with an optional
//! exponential step-size decay per epoch. Given a seed the trajectory is
//! bitwise deterministic.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{seeded_rng, Matrix};

/// Flat position of last-layer weight (feature f, class k): f * K + k.
pub fn flat_index(k_classes: usize, f: usize, k: usize) -> usize {
    f * k_classes + k
}

/// Tag stored in checkpoints so readers can reject a foreign layout.
pub const FLATTEN_ORDER: &str = "feature-major";

const CHECKPOINT_VERSION: u32 = 1;

/// Inputs with integer class labels.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    inputs: Matrix,
    labels: Vec<usize>,
    k_classes: usize,
}

impl LabeledBatch {
    pub fn new(inputs: Matrix, labels: Vec<usize>, k_classes: usize) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::EmptyBatch("labeled batch"));
        }
        if labels.len() != inputs.rows() {
            return Err(Error::LengthMismatch {
                left: inputs.rows(),
                right: labels.len(),
                context: "batch inputs vs labels",
            });
        }
        for &y in &labels {
            if y >= k_classes {
                return Err(Error::InvalidConfig(format!(
                    "label {y} out of range for {k_classes} classes"
                )));
            }
        }
        Ok(LabeledBatch {
            inputs,
            labels,
            k_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn k_classes(&self) -> usize {
        self.k_classes
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// A new batch holding the selected rows, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<LabeledBatch> {
        if idx.is_empty() {
            return Err(Error::EmptyBatch("batch subset"));
        }
        let mut inputs = Matrix::zeros(idx.len(), self.input_dim());
        let mut labels = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            inputs.row_mut(r).copy_from_slice(self.input(i));
            labels.push(self.label(i));
        }
        LabeledBatch::new(inputs, labels, self.k_classes)
    }

    /// The batch with sample i removed.
    pub fn leave_out(&self, i: usize) -> Result<LabeledBatch> {
        let idx: Vec<usize> = (0..self.len()).filter(|&j| j != i).collect();
        self.subset(&idx)
    }
}

/// Adam hyperparameters and the epoch/batch schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Multiplies the step size once per epoch; 1.0 disables decay.
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            epochs: 100,
            batch_size: 32,
            weight_decay: 0.0,
            lr_decay: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig(format!(
                "adam betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "lr decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        Ok(())
    }
}

/// ReLU MLP with hidden stack phi and last-layer weight W.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    /// input dim, hidden dims..., K.
    layer_dims: Vec<usize>,
    /// Per hidden layer: weight (out x in) and bias (out).
    hidden: Vec<(Matrix, Vec<f64>)>,
    /// (feature_dim x K); the final row multiplies the constant-1 feature.
    last_w: Matrix,
}

impl MlpModel {
    /// Randomly initialized model: scaled-normal hidden weights
    /// (std sqrt(2 / fan_in), the usual ReLU scaling), zero hidden biases,
    /// and std sqrt(1 / feature_dim) for the last layer.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        Self::check_dims(layer_dims)?;
        let mut rng = seeded_rng(seed);
        let n = layer_dims.len();
        let mut hidden = Vec::with_capacity(n - 2);
        for h in 0..n - 2 {
            let (fan_in, fan_out) = (layer_dims[h], layer_dims[h + 1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let w = Matrix::from_fn(fan_out, fan_in, |_, _| {
                std * rng.sample::<f64, _>(StandardNormal)
            });
            hidden.push((w, vec![0.0; fan_out]));
        }
        let feature_dim = layer_dims[n - 2] + 1;
        let k = layer_dims[n - 1];
        let std = (1.0 / feature_dim as f64).sqrt();
        let last_w = Matrix::from_fn(feature_dim, k, |_, _| {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        Ok(MlpModel {
            layer_dims: layer_dims.to_vec(),
            hidden,
            last_w,
        })
    }

    /// All-zero parameters; useful as a fixed deterministic starting point.
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        Self::check_dims(layer_dims)?;
        let n = layer_dims.len();
        let hidden = (0..n - 2)
            .map(|h| {
                (
                    Matrix::zeros(layer_dims[h + 1], layer_dims[h]),
                    vec![0.0; layer_dims[h + 1]],
                )
            })
            .collect();
        let last_w = Matrix::zeros(layer_dims[n - 2] + 1, layer_dims[n - 1]);
        Ok(MlpModel {
            layer_dims: layer_dims.to_vec(),
            hidden,
            last_w,
        })
    }

    fn check_dims(layer_dims: &[usize]) -> Result<()> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidConfig(
                "layer_dims needs at least input dim and class count".into(),
            ));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig("layer dims must be positive".into()));
        }
        if layer_dims[layer_dims.len() - 1] < 2 {
            return Err(Error::InvalidConfig(
                "classifier needs at least two classes".into(),
            ));
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn k_classes(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 1]
    }

    /// Hidden output size plus one for the constant feature.
    pub fn feature_dim(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 2] + 1
    }

    pub fn last_weight(&self) -> &Matrix {
        &self.last_w
    }

    /// Replace the last-layer weight (shape-checked); hidden layers keep
    /// their parameters. Ensemble members share phi and differ only here.
    pub fn with_last_weight(&self, w: Matrix) -> Result<MlpModel> {
        if w.rows() != self.feature_dim() || w.cols() != self.k_classes() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim() * self.k_classes(),
                got: w.rows() * w.cols(),
                context: "last-layer weight shape",
            });
        }
        let mut m = self.clone();
        m.last_w = w;
        Ok(m)
    }

    /// The last-layer weight flattened in feature-major order.
    pub fn last_weight_flat(&self) -> Vec<f64> {
        self.last_w.as_slice().to_vec()
    }

    /// Rebuild the (feature_dim x K) weight from a feature-major flat vector.
    pub fn last_weight_from_flat(&self, flat: &[f64]) -> Result<Matrix> {
        let (fd, k) = (self.feature_dim(), self.k_classes());
        if flat.len() != fd * k {
            return Err(Error::DimensionMismatch {
                expected: fd * k,
                got: flat.len(),
                context: "flattened last-layer weight",
            });
        }
        Ok(Matrix::from_vec(fd, k, flat.to_vec()))
    }

    /// g(x): hidden ReLU stack output with the constant-1 feature appended.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
                context: "model input",
            });
        }
        let mut a = x.to_vec();
        for (w, b) in &self.hidden {
            let mut z = w.matvec(&a);
            for (zi, bi) in z.iter_mut().zip(b) {
                *zi = (*zi + bi).max(0.0);
            }
            a = z;
        }
        a.push(1.0);
        Ok(a)
    }

    /// a = g(x)^T W, length K.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.logits_from_features(&self.features(x)?))
    }

    /// The linear head applied to an already-computed feature vector.
    pub fn logits_from_features(&self, g: &[f64]) -> Vec<f64> {
        self.last_w.tr_matvec(g)
    }

    /// Sum over the batch of -log softmax_{y_i}(logits(x_i)), via
    /// log-sum-exp.
    pub fn nll_loss(&self, batch: &LabeledBatch) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..batch.len() {
            let a = self.logits(batch.input(i))?;
            total += nll_of_logits(&a, batch.label(i));
        }
        Ok(total)
    }

    /// Last-layer gradient of the per-sample loss: g(x) outer (p - onehot_y),
    /// flattened feature-major. Length feature_dim * K.
    pub fn grad_per_sample(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        let k = self.k_classes();
        if y >= k {
            return Err(Error::InvalidConfig(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        let g = self.features(x)?;
        let a = self.logits_from_features(&g);
        let p = crate::gsint::softmax(&a);
        let mut grad = vec![0.0; g.len() * k];
        for (f, &gf) in g.iter().enumerate() {
            for kk in 0..k {
                let resid = p[kk] - if kk == y { 1.0 } else { 0.0 };
                grad[flat_index(k, f, kk)] = gf * resid;
            }
        }
        Ok(grad)
    }

    /// Forward pass keeping pre- and post-activation values for backprop.
    /// Returns (per-hidden-layer post-activations, features, logits).
    fn forward_trace(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.hidden.len());
        let mut a = x.to_vec();
        for (w, b) in &self.hidden {
            let mut z = w.matvec(&a);
            for (zi, bi) in z.iter_mut().zip(b) {
                *zi = (*zi + bi).max(0.0);
            }
            acts.push(z.clone());
            a = z;
        }
        a.push(1.0);
        let logits = self.logits_from_features(&a);
        (acts, a, logits)
    }

    /// Mean gradient of the batch NLL over all parameters.
    /// Returns (hidden gradients, last-layer gradient) in layer order.
    fn batch_gradients(
        &self,
        batch: &LabeledBatch,
        idx: &[usize],
    ) -> Result<(Vec<(Matrix, Vec<f64>)>, Matrix)> {
        let k = self.k_classes();
        let mut gh: Vec<(Matrix, Vec<f64>)> = self
            .hidden
            .iter()
            .map(|(w, b)| (Matrix::zeros(w.rows(), w.cols()), vec![0.0; b.len()]))
            .collect();
        let mut gw = Matrix::zeros(self.last_w.rows(), self.last_w.cols());
        for &i in idx {
            let x = batch.input(i);
            let y = batch.label(i);
            let (acts, g, logits) = self.forward_trace(x);
            // Tolerant softmax: a diverging run turns these into NaN, which
            // flows to the epoch-end loss check instead of panicking here.
            let p = tolerant_softmax(&logits);
            let mut delta: Vec<f64> = (0..k)
                .map(|kk| p[kk] - if kk == y { 1.0 } else { 0.0 })
                .collect();
            // last layer: dW[f][k] += g[f] * delta[k]
            for (f, &gf) in g.iter().enumerate() {
                let row = gw.row_mut(f);
                for (kk, d) in delta.iter().enumerate() {
                    row[kk] += gf * d;
                }
            }
            // back through the linear head, dropping the constant feature
            let mut up: Vec<f64> = self.last_w.matvec(&delta);
            up.pop();
            delta = up;
            // hidden layers in reverse
            for h in (0..self.hidden.len()).rev() {
                let (w, _) = &self.hidden[h];
                let post = &acts[h];
                for (d, &a) in delta.iter_mut().zip(post) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
                let prev: &[f64] = if h == 0 { x } else { &acts[h - 1] };
                let (gwh, gbh) = &mut gh[h];
                for (r, &d) in delta.iter().enumerate() {
                    gbh[r] += d;
                    let row = gwh.row_mut(r);
                    for (c, &pv) in prev.iter().enumerate() {
                        row[c] += d * pv;
                    }
                }
                if h > 0 {
                    delta = w.tr_matvec(&delta);
                }
            }
        }
        let inv = 1.0 / idx.len() as f64;
        for (w, b) in gh.iter_mut() {
            for v in w.as_mut_slice() {
                *v *= inv;
            }
            for v in b.iter_mut() {
                *v *= inv;
            }
        }
        for v in gw.as_mut_slice() {
            *v *= inv;
        }
        Ok((gh, gw))
    }
}

/// Max-shifted softmax without finiteness assertions; NaN in, NaN out.
fn tolerant_softmax(a: &[f64]) -> Vec<f64> {
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = a.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// -log softmax_y(a) computed stably.
pub(crate) fn nll_of_logits(a: &[f64], y: usize) -> f64 {
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + a.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    lse - a[y]
}

/// One Adam moment pair per parameter tensor.
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    fn update(&mut self, theta: &mut [f64], grad: &[f64], cfg: &TrainConfig, lr: f64, t: i32) {
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..theta.len() {
            let g = grad[i] + cfg.weight_decay * theta[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            theta[i] -= lr * mhat / (vhat.sqrt() + cfg.eps_adam);
        }
    }
}

/// Mini-batch Adam over shuffled epochs. Deterministic given cfg.seed.
/// Returns the trained model and the mean per-sample training loss recorded
/// at the end of each epoch.
pub fn train(
    init: &MlpModel,
    data: &LabeledBatch,
    cfg: &TrainConfig,
) -> Result<(MlpModel, Vec<f64>)> {
    cfg.validate()?;
    if data.input_dim() != init.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: init.input_dim(),
            got: data.input_dim(),
            context: "training data width",
        });
    }
    if data.k_classes() != init.k_classes() {
        return Err(Error::DimensionMismatch {
            expected: init.k_classes(),
            got: data.k_classes(),
            context: "training data class count",
        });
    }
    let mut model = init.clone();
    let mut rng = seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut hidden_state: Vec<(AdamState, AdamState)> = model
        .hidden
        .iter()
        .map(|(w, b)| (AdamState::new(w.as_slice().len()), AdamState::new(b.len())))
        .collect();
    let mut last_state = AdamState::new(model.last_w.as_slice().len());
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut t = 0i32;
    let mut lr = cfg.step_size;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (gh, gw) = model.batch_gradients(data, chunk)?;
            t += 1;
            for (h, (gwh, gbh)) in gh.iter().enumerate() {
                let (ws, bs) = &mut hidden_state[h];
                let (w, b) = &mut model.hidden[h];
                ws.update(w.as_mut_slice(), gwh.as_slice(), cfg, lr, t);
                bs.update(b, gbh, cfg, lr, t);
            }
            last_state.update(model.last_w.as_mut_slice(), gw.as_slice(), cfg, lr, t);
        }
        lr *= cfg.lr_decay;
        let loss = model.nll_loss(data)? / data.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        trace.push(loss);
    }
    Ok((model, trace))
}

/// Fraction of batch samples whose argmax logit is not the label.
pub fn classification_error(model: &MlpModel, batch: &LabeledBatch) -> Result<f64> {
    let mut wrong = 0usize;
    for i in 0..batch.len() {
        let a = model.logits(batch.input(i))?;
        let pred = argmax(&a);
        if pred != batch.label(i) {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / batch.len() as f64)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// On-disk checkpoint layout. JSON keeps the format inspectable; the version
/// and flattening tag guard against silent layout drift.
#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    flatten_order: String,
    layer_dims: Vec<usize>,
    hidden_weights: Vec<Vec<f64>>,
    hidden_biases: Vec<Vec<f64>>,
    last_weight: Vec<f64>,
}

impl MlpModel {
    fn to_checkpoint(&self) -> CheckpointFile {
        CheckpointFile {
            version: CHECKPOINT_VERSION,
            flatten_order: FLATTEN_ORDER.to_string(),
            layer_dims: self.layer_dims.clone(),
            hidden_weights: self
                .hidden
                .iter()
                .map(|(w, _)| w.as_slice().to_vec())
                .collect(),
            hidden_biases: self.hidden.iter().map(|(_, b)| b.clone()).collect(),
            last_weight: self.last_w.as_slice().to_vec(),
        }
    }

    /// Canonical serialized form; identical bytes for identical parameters.
    /// Curvature caches hash this string to detect stale checkpoints.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serialization")
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.canonical_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<MlpModel> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: CheckpointFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::BadData {
                path: path.display().to_string(),
                reason: format!(
                    "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                    ck.version
                ),
            });
        }
        if ck.flatten_order != FLATTEN_ORDER {
            return Err(Error::BadData {
                path: path.display().to_string(),
                reason: format!(
                    "unknown flatten order '{}' (expected '{FLATTEN_ORDER}')",
                    ck.flatten_order
                ),
            });
        }
        Self::check_dims(&ck.layer_dims).map_err(|_| Error::BadData {
            path: path.display().to_string(),
            reason: "inconsistent layer dims".into(),
        })?;
        let n = ck.layer_dims.len();
        if ck.hidden_weights.len() != n - 2 || ck.hidden_biases.len() != n - 2 {
            return Err(Error::BadData {
                path: path.display().to_string(),
                reason: "hidden layer count does not match layer dims".into(),
            });
        }
        let mut hidden = Vec::with_capacity(n - 2);
        for h in 0..n - 2 {
            let (rows, cols) = (ck.layer_dims[h + 1], ck.layer_dims[h]);
            if ck.hidden_weights[h].len() != rows * cols || ck.hidden_biases[h].len() != rows {
                return Err(Error::BadData {
                    path: path.display().to_string(),
                    reason: format!("hidden layer {h} has wrong parameter count"),
                });
            }
            hidden.push((
                Matrix::from_vec(rows, cols, ck.hidden_weights[h].clone()),
                ck.hidden_biases[h].clone(),
            ));
        }
        let (fd, k) = (ck.layer_dims[n - 2] + 1, ck.layer_dims[n - 1]);
        if ck.last_weight.len() != fd * k {
            return Err(Error::BadData {
                path: path.display().to_string(),
                reason: "last-layer weight has wrong parameter count".into(),
            });
        }
        let all_params_finite = ck
            .last_weight
            .iter()
            .chain(ck.hidden_weights.iter().flatten())
            .chain(ck.hidden_biases.iter().flatten())
            .all(|v| v.is_finite());
        if !all_params_finite {
            return Err(Error::BadData {
                path: path.display().to_string(),
                reason: "non-finite parameter".into(),
            });
        }
        Ok(MlpModel {
            layer_dims: ck.layer_dims,
            hidden,
            last_w: Matrix::from_vec(fd, k, ck.last_weight),
        })
    }
}
