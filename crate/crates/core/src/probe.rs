//! Multilabel probes: a linear layer (or one ReLU hidden layer) with sigmoid
//! outputs, trained on mean binary cross-entropy with Adam.
//!
//! Parameters live in one flat `f64` buffer so that the optimizer, the
//! gradient check and checkpointing all work on the same layout:
//!
//! * linear: `W (|F| x d) | b (|F|)`
//! * mlp1: `H (h x d) | c (h) | O (|F| x h) | b (|F|)`

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{Dataset, EmbeddingCache, TokenBatch, DEFAULT_BATCH_SIZE};
use crate::labels::{LabelError, LabelSpace, TargetVector};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProbeError {
    #[error("input dimension {found} does not match probe dimension {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("target width {found} does not match probe output size {expected}")]
    LabelMismatch { expected: usize, found: usize },
    #[error("parameter buffer has {found} values, expected {expected}")]
    ParamCount { expected: usize, found: usize },
    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("loss became non-finite at epoch {epoch}, batch {batch} (last finite loss {last_loss})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        last_loss: f64,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Label(#[from] LabelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProbeKind {
    Linear,
    Mlp1 { hidden: usize },
}

impl ProbeKind {
    pub fn hidden(self) -> usize {
        match self {
            ProbeKind::Linear => 0,
            ProbeKind::Mlp1 { hidden } => hidden,
        }
    }

    /// Short identifier, e.g. `linear` or `mlp1-128`.
    pub fn tag(self) -> alloc::string::String {
        match self {
            ProbeKind::Linear => "linear".into(),
            ProbeKind::Mlp1 { hidden } => alloc::format!("mlp1-{hidden}"),
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// `-[y log s(z) + (1 - y) log(1 - s(z))]` evaluated from the logit.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + libm::log1p(libm::exp(-libm::fabs(z)))
}

/// Mean BCE over all cells, from logits.
pub fn bce_with_logits(logits: &[f64], targets: &[f64]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| bce_with_logit(z, y))
        .sum();
    total / logits.len() as f64
}

/// Mean BCE over all cells, from probabilities. Scores are clamped to
/// `[1e-12, 1 - 1e-12]` so saturated outputs stay finite.
pub fn bce_loss(scores: &[f64], targets: &[f64]) -> f64 {
    const EPS: f64 = 1e-12;
    if scores.is_empty() {
        return 0.0;
    }
    let total: f64 = scores
        .iter()
        .zip(targets)
        .map(|(&s, &y)| {
            let s = s.clamp(EPS, 1.0 - EPS);
            -(y * libm::log(s) + (1.0 - y) * libm::log(1.0 - s))
        })
        .sum();
    total / scores.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub kind: ProbeKind,
    pub dim: usize,
    pub n_labels: usize,
    pub params: Vec<f64>,
}

impl ProbeModel {
    pub fn param_count(kind: ProbeKind, dim: usize, n_labels: usize) -> usize {
        match kind {
            ProbeKind::Linear => n_labels * dim + n_labels,
            ProbeKind::Mlp1 { hidden } => hidden * dim + hidden + n_labels * hidden + n_labels,
        }
    }

    pub fn zeros(kind: ProbeKind, dim: usize, n_labels: usize) -> Self {
        ProbeModel {
            kind,
            dim,
            n_labels,
            params: alloc::vec![0.0; Self::param_count(kind, dim, n_labels)],
        }
    }

    pub fn from_params(
        kind: ProbeKind,
        dim: usize,
        n_labels: usize,
        params: Vec<f64>,
    ) -> Result<Self, ProbeError> {
        let expected = Self::param_count(kind, dim, n_labels);
        if params.len() != expected {
            return Err(ProbeError::ParamCount {
                expected,
                found: params.len(),
            });
        }
        Ok(ProbeModel {
            kind,
            dim,
            n_labels,
            params,
        })
    }

    /// Every weight and bias uniform in `+-1/sqrt(fan_in)`.
    pub fn init(kind: ProbeKind, dim: usize, n_labels: usize, seed: u64) -> Self {
        let mut model = Self::zeros(kind, dim, n_labels);
        let mut rng = rng_from_seed(seed);
        let bound = |fan_in: usize| 1.0 / libm::sqrt(fan_in.max(1) as f64);
        let (first_len, first_bound) = match kind {
            ProbeKind::Linear => (model.params.len(), bound(dim)),
            ProbeKind::Mlp1 { hidden } => (hidden * dim + hidden, bound(dim)),
        };
        let second_bound = bound(kind.hidden());
        for (i, p) in model.params.iter_mut().enumerate() {
            let a = if i < first_len { first_bound } else { second_bound };
            *p = rng.random_range(-a..a);
        }
        model
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Logits for a single input row. `hidden` is scratch of length `h`.
    fn logits_row(&self, x: &[f64], hidden: &mut [f64], out: &mut [f64]) {
        let (d, f) = (self.dim, self.n_labels);
        match self.kind {
            ProbeKind::Linear => {
                let (w, b) = self.params.split_at(f * d);
                for j in 0..f {
                    out[j] = b[j] + dot(&w[j * d..(j + 1) * d], x);
                }
            }
            ProbeKind::Mlp1 { hidden: h } => {
                let (hw, rest) = self.params.split_at(h * d);
                let (hc, rest) = rest.split_at(h);
                let (ow, ob) = rest.split_at(f * h);
                for k in 0..h {
                    hidden[k] = (hc[k] + dot(&hw[k * d..(k + 1) * d], x)).max(0.0);
                }
                for j in 0..f {
                    out[j] = ob[j] + dot(&ow[j * h..(j + 1) * h], hidden);
                }
            }
        }
    }

    /// Row-major `rows x |F|` logits.
    pub fn logits(&self, inputs: &[f64], rows: usize) -> Result<Vec<f64>, ProbeError> {
        if inputs.len() != rows * self.dim {
            return Err(ProbeError::DimMismatch {
                expected: self.dim,
                found: if rows == 0 { inputs.len() } else { inputs.len() / rows },
            });
        }
        let mut out = alloc::vec![0.0; rows * self.n_labels];
        let mut hidden = alloc::vec![0.0; self.kind.hidden()];
        for r in 0..rows {
            self.logits_row(
                &inputs[r * self.dim..(r + 1) * self.dim],
                &mut hidden,
                &mut out[r * self.n_labels..(r + 1) * self.n_labels],
            );
        }
        Ok(out)
    }

    /// Sum of per-cell BCE over the batch, with the gradient of that sum
    /// added into `grads`.
    fn accumulate(&self, batch: &TokenBatch, grads: &mut [f64]) -> f64 {
        let (d, f) = (self.dim, self.n_labels);
        let mut loss = 0.0;
        match self.kind {
            ProbeKind::Linear => {
                let (w, b) = self.params.split_at(f * d);
                let (gw, gb) = grads.split_at_mut(f * d);
                for r in 0..batch.rows {
                    let (x, y) = (batch.input(r), batch.target(r));
                    for j in 0..f {
                        let z = b[j] + dot(&w[j * d..(j + 1) * d], x);
                        loss += bce_with_logit(z, y[j]);
                        let delta = sigmoid(z) - y[j];
                        axpy(delta, x, &mut gw[j * d..(j + 1) * d]);
                        gb[j] += delta;
                    }
                }
            }
            ProbeKind::Mlp1 { hidden: h } => {
                let (hw, rest) = self.params.split_at(h * d);
                let (hc, rest) = rest.split_at(h);
                let (ow, ob) = rest.split_at(f * h);
                let (ghw, grest) = grads.split_at_mut(h * d);
                let (ghc, grest) = grest.split_at_mut(h);
                let (gow, gob) = grest.split_at_mut(f * h);
                let mut pre = alloc::vec![0.0; h];
                let mut act = alloc::vec![0.0; h];
                let mut back = alloc::vec![0.0; h];
                for r in 0..batch.rows {
                    let (x, y) = (batch.input(r), batch.target(r));
                    for k in 0..h {
                        pre[k] = hc[k] + dot(&hw[k * d..(k + 1) * d], x);
                        act[k] = pre[k].max(0.0);
                    }
                    back.iter_mut().for_each(|v| *v = 0.0);
                    for j in 0..f {
                        let orow = &ow[j * h..(j + 1) * h];
                        let z = ob[j] + dot(orow, &act);
                        loss += bce_with_logit(z, y[j]);
                        let delta = sigmoid(z) - y[j];
                        axpy(delta, &act, &mut gow[j * h..(j + 1) * h]);
                        gob[j] += delta;
                        axpy(delta, orow, &mut back);
                    }
                    for k in 0..h {
                        if pre[k] > 0.0 {
                            axpy(back[k], x, &mut ghw[k * d..(k + 1) * d]);
                            ghc[k] += back[k];
                        }
                    }
                }
            }
        }
        loss
    }

    /// Mean BCE over the batch and its gradient.
    pub fn loss_and_gradient(&self, batch: &TokenBatch) -> Result<(f64, Vec<f64>), ProbeError> {
        self.check_batch(batch)?;
        let mut grads = alloc::vec![0.0; self.params.len()];
        let cells = (batch.rows * self.n_labels) as f64;
        if cells == 0.0 {
            return Ok((0.0, grads));
        }
        let loss = self.accumulate(batch, &mut grads) / cells;
        grads.iter_mut().for_each(|g| *g /= cells);
        Ok((loss, grads))
    }

    /// Mean BCE over the batch.
    pub fn batch_loss(&self, batch: &TokenBatch) -> Result<f64, ProbeError> {
        self.check_batch(batch)?;
        let logits = self.logits(&batch.inputs, batch.rows)?;
        Ok(bce_with_logits(&logits, &batch.targets))
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<(), ProbeError> {
        if batch.dim != self.dim {
            return Err(ProbeError::DimMismatch {
                expected: self.dim,
                found: batch.dim,
            });
        }
        if batch.n_labels != self.n_labels {
            return Err(ProbeError::LabelMismatch {
                expected: self.n_labels,
                found: batch.n_labels,
            });
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Row-major `rows x |F|` sigmoid scores.
pub fn forward(model: &ProbeModel, inputs: &[f64], rows: usize) -> Result<Vec<f64>, ProbeError> {
    let mut scores = model.logits(inputs, rows)?;
    scores.iter_mut().for_each(|z| *z = sigmoid(*z));
    Ok(scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: alloc::vec![0.0; n_params],
            v: alloc::vec![0.0; n_params],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update; increments `state.step`.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<(), ProbeError> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(ProbeError::ParamCount {
            expected: params.len(),
            found: grads.len(),
        });
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(ProbeError::NonFiniteGradient { index });
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - libm::pow(config.beta1, t);
    let c2 = 1.0 - libm::pow(config.beta2, t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= config.learning_rate * m_hat / (libm::sqrt(v_hat) + config.epsilon);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub init_seed: u64,
    /// Stop after this many epochs without a dev-loss improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            epochs: 50,
            batch_size: DEFAULT_BATCH_SIZE,
            shuffle_seed: 0,
            init_seed: 0,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub train_loss: Vec<f64>,
    pub dev_loss: Vec<f64>,
    /// 0-based index of the epoch whose parameters were kept.
    pub selected_epoch: usize,
    pub best_dev_loss: f64,
    /// Filled in by callers that have a clock.
    pub wall_clock_secs: Option<f64>,
}

/// Mean BCE over every cell of the dataset, summed in a fixed order.
pub fn dataset_loss(model: &ProbeModel, data: &Dataset) -> Result<f64, ProbeError> {
    if data.dim() != model.dim {
        return Err(ProbeError::DimMismatch {
            expected: model.dim,
            found: data.dim(),
        });
    }
    if data.is_empty() {
        return Err(ProbeError::EmptyDataset);
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for batch in data.batches(&order, DEFAULT_BATCH_SIZE) {
        model.check_batch(&batch)?;
        let logits = model.logits(&batch.inputs, batch.rows)?;
        total += logits
            .iter()
            .zip(&batch.targets)
            .map(|(&z, &y)| bce_with_logit(z, y))
            .sum::<f64>();
    }
    Ok(total / (data.len() * data.n_labels()) as f64)
}

/// Trains a probe and returns the parameters from the epoch with the lowest
/// dev loss (earliest on ties).
pub fn train(
    train_data: &Dataset,
    dev_data: &Dataset,
    kind: ProbeKind,
    config: &TrainConfig,
) -> Result<(ProbeModel, TrainRecord), ProbeError> {
    if config.epochs == 0 {
        return Err(ProbeError::InvalidConfig("epochs must be at least 1"));
    }
    if config.batch_size == 0 {
        return Err(ProbeError::InvalidConfig("batch size must be at least 1"));
    }
    if matches!(kind, ProbeKind::Mlp1 { hidden: 0 }) {
        return Err(ProbeError::InvalidConfig("hidden width must be at least 1"));
    }
    if train_data.is_empty() || dev_data.is_empty() {
        return Err(ProbeError::EmptyDataset);
    }
    if dev_data.dim() != train_data.dim() {
        return Err(ProbeError::DimMismatch {
            expected: train_data.dim(),
            found: dev_data.dim(),
        });
    }
    if dev_data.n_labels() != train_data.n_labels() {
        return Err(ProbeError::LabelMismatch {
            expected: train_data.n_labels(),
            found: dev_data.n_labels(),
        });
    }

    let (dim, n_labels) = (train_data.dim(), train_data.n_labels());
    let mut model = ProbeModel::init(kind, dim, n_labels, config.init_seed);
    let mut state = AdamState::new(model.params.len());
    let adam = config.adam();
    let mut rng = rng_from_seed(config.shuffle_seed);
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    let mut record = TrainRecord {
        train_loss: Vec::with_capacity(config.epochs),
        dev_loss: Vec::with_capacity(config.epochs),
        selected_epoch: 0,
        best_dev_loss: f64::INFINITY,
        wall_clock_secs: None,
    };
    let mut best = model.clone();
    let mut last_loss = f64::NAN;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for (batch_idx, batch) in train_data.batches(&order, config.batch_size).enumerate() {
            let (loss, grads) = model.loss_and_gradient(&batch)?;
            if !loss.is_finite() {
                return Err(ProbeError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    last_loss,
                });
            }
            last_loss = loss;
            epoch_sum += loss * batch.rows as f64;
            adam_step(&mut model.params, &grads, &mut state, &adam)?;
        }
        let dev_loss = dataset_loss(&model, dev_data)?;
        if !dev_loss.is_finite() {
            return Err(ProbeError::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
                last_loss,
            });
        }
        record.train_loss.push(epoch_sum / train_data.len() as f64);
        record.dev_loss.push(dev_loss);
        if dev_loss < record.best_dev_loss {
            record.best_dev_loss = dev_loss;
            record.selected_epoch = epoch;
            best.params.copy_from_slice(&model.params);
        }
        if let Some(p) = config.patience {
            if epoch - record.selected_epoch >= p {
                break;
            }
        }
    }
    Ok((best, record))
}

/// Scores and thresholded predictions for every token of a cache.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub n_labels: usize,
    /// Row-major `tokens x |F|`.
    pub scores: Vec<f64>,
    pub predicted: Vec<TargetVector>,
}

impl Predictions {
    pub fn token_scores(&self, i: usize) -> &[f64] {
        &self.scores[i * self.n_labels..(i + 1) * self.n_labels]
    }
}

pub fn predict_scores(model: &ProbeModel, cache: &EmbeddingCache) -> Result<Vec<f64>, ProbeError> {
    if cache.dim() != model.dim {
        return Err(ProbeError::DimMismatch {
            expected: model.dim,
            found: cache.dim(),
        });
    }
    let n = cache.n_tokens();
    let mut scores = Vec::with_capacity(n * model.n_labels);
    let chunk = DEFAULT_BATCH_SIZE;
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let inputs: Vec<f64> = cache.data()[start * model.dim..end * model.dim]
            .iter()
            .map(|&x| f64::from(x))
            .collect();
        scores.extend(forward(model, &inputs, end - start)?);
    }
    Ok(scores)
}

pub fn predict(
    model: &ProbeModel,
    cache: &EmbeddingCache,
    space: &LabelSpace,
    threshold: f64,
) -> Result<Predictions, ProbeError> {
    if space.len() != model.n_labels {
        return Err(ProbeError::LabelMismatch {
            expected: model.n_labels,
            found: space.len(),
        });
    }
    let scores = predict_scores(model, cache)?;
    let predicted = scores
        .chunks(model.n_labels.max(1))
        .map(|row| space.threshold_scores(row, threshold))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Predictions {
        n_labels: model.n_labels,
        scores,
        predicted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn batch(rows: usize, dim: usize, n_labels: usize, inputs: Vec<f64>, targets: Vec<f64>) -> TokenBatch {
        TokenBatch {
            rows,
            dim,
            n_labels,
            inputs,
            targets,
        }
    }

    #[test]
    fn zero_model_scores_half() {
        let m = ProbeModel::zeros(ProbeKind::Linear, 3, 4);
        let s = forward(&m, &[1.0, -2.0, 3.0, 0.5, 0.5, 0.5], 2).unwrap();
        assert!(s.iter().all(|&x| x == 0.5));
        assert!(forward(&m, &[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!(bce_with_logit(1000.0, 1.0).abs() < 1e-300);
        assert!((bce_with_logit(-1000.0, 1.0) - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn hand_computed_two_by_two() {
        // W = [[1, 0], [0.5, -1]], b = [0, 0.25], x = (2, 1)
        // z = (2, 0.25 + 1 - 1) = (2, 0.25)
        let m = ProbeModel::from_params(ProbeKind::Linear, 2, 2, vec![1.0, 0.0, 0.5, -1.0, 0.0, 0.25]).unwrap();
        let s = forward(&m, &[2.0, 1.0], 1).unwrap();
        let expect = [1.0 / (1.0 + (-2.0f64).exp()), 1.0 / (1.0 + (-0.25f64).exp())];
        assert!((s[0] - expect[0]).abs() < 1e-15);
        assert!((s[1] - expect[1]).abs() < 1e-15);
    }

    #[test]
    fn mlp_forward_by_hand() {
        // d = 1, h = 2, F = 1: H = [1, -1], c = [0, 0], O = [2, 3], b = [-1]
        let m = ProbeModel::from_params(
            ProbeKind::Mlp1 { hidden: 2 },
            1,
            1,
            vec![1.0, -1.0, 0.0, 0.0, 2.0, 3.0, -1.0],
        )
        .unwrap();
        // x = 0.5: hidden = (0.5, 0) -> z = 1 - 1 = 0
        assert_eq!(forward(&m, &[0.5], 1).unwrap(), vec![0.5]);
        // x = -1: hidden = (0, 1) -> z = 3 - 1 = 2
        assert!((forward(&m, &[-1.0], 1).unwrap()[0] - sigmoid(2.0)).abs() < 1e-15);
    }

    #[test]
    fn ln2_at_half() {
        let loss = bce_loss(&[0.5; 6], &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
        assert!((loss - core::f64::consts::LN_2).abs() < 1e-15);
        let from_logits = bce_with_logits(&[0.0; 6], &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
        assert!((from_logits - core::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(&[1.0, 0.0], &[1.0, 0.0]) < 1e-11);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = vec![0.3, -1.2];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![0.3, -1.2]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut st, &cfg).unwrap();
        let expected = -cfg.learning_rate / (1.0 + cfg.epsilon);
        assert!((p[0] - expected).abs() < 1e-18);
        assert!(adam_step(&mut p, &[f64::NAN], &mut st, &cfg).is_err());
    }

    #[test]
    fn adam_decreases_quadratic() {
        // f(x) = sum (x_i - 3)^2
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut p = vec![0.0, 10.0, -4.0];
        let mut st = AdamState::new(3);
        let f = |p: &[f64]| p.iter().map(|x| (x - 3.0) * (x - 3.0)).sum::<f64>();
        let mut prev = f(&p);
        for _ in 0..10 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * (x - 3.0)).collect();
            adam_step(&mut p, &g, &mut st, &cfg).unwrap();
            let now = f(&p);
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn batch_shape_checks() {
        let m = ProbeModel::zeros(ProbeKind::Linear, 2, 3);
        let b = batch(1, 3, 3, vec![0.0; 3], vec![0.0; 3]);
        assert!(matches!(m.loss_and_gradient(&b), Err(ProbeError::DimMismatch { .. })));
        let b = batch(1, 2, 2, vec![0.0; 2], vec![0.0; 2]);
        assert!(matches!(m.loss_and_gradient(&b), Err(ProbeError::LabelMismatch { .. })));
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let a = ProbeModel::init(ProbeKind::Linear, 16, 3, 1);
        let b = ProbeModel::init(ProbeKind::Linear, 16, 3, 1);
        let c = ProbeModel::init(ProbeKind::Linear, 16, 3, 2);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.params.iter().all(|p| p.abs() < 0.25));
        let mlp = ProbeModel::init(ProbeKind::Mlp1 { hidden: 4 }, 16, 3, 1);
        assert_eq!(mlp.params.len(), 4 * 16 + 4 + 3 * 4 + 3);
        // output layer fans in from 4 hidden units
        assert!(mlp.params[68..].iter().all(|p| p.abs() < 0.5));
    }
}
