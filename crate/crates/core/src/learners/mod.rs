//! From-scratch feed-forward base learners.
//!
//! Softmax regression (no hidden layers) and ReLU/tanh multilayer
//! perceptrons in double precision, trained with mini-batch SGD or Adam,
//! global-norm gradient clipping and inverse-time learning-rate decay.

mod blob;
mod network;
mod optim;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use blob::{read_layers, write_layers};
pub use network::{init_params, softmax, Activation, Dense, NetworkParams, NetworkSpec};
pub use optim::{clip_global_norm, lr_at, OptimizerKind, ScheduleKind};

pub(crate) use network::{argmax_rows, init_layers};
pub(crate) use optim::Optimizer;

use crate::seed;
use crate::{Error, Result};

/// Probabilities are floored at this value before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

const SHUFFLE_STREAM: u64 = 0x5f1e;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub base_lr: f64,
    pub decay_rate: f64,
    pub decay_step: usize,
    pub warmup_iterations: usize,
    pub grad_clip: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub schedule: ScheduleKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            base_lr: 0.001,
            decay_rate: 0.05,
            decay_step: 500,
            warmup_iterations: 0,
            grad_clip: Some(5.0),
            batch_size: 32,
            epochs: 10,
            seed: 0,
            schedule: ScheduleKind::PerEpoch,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be > 0, got {}", self.base_lr));
        }
        if !(self.decay_rate >= 0.0 && self.decay_rate.is_finite()) {
            return bad(format!("decay_rate must be >= 0, got {}", self.decay_rate));
        }
        if self.decay_step == 0 {
            return bad("decay_step must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return bad(format!("grad_clip must be > 0, got {c}"));
            }
        }
        Ok(())
    }

    /// Learning rate for a mini-batch at `iteration` within `epoch`.
    pub(crate) fn lr_for(&self, epoch: usize, iteration: usize) -> f64 {
        match self.schedule {
            ScheduleKind::PerEpoch => lr_at(self, epoch),
            ScheduleKind::PerIterationAfterWarmup => lr_at(self, iteration),
        }
    }
}

/// Features with 0-based integer labels.
#[derive(Debug, Clone, Copy)]
pub struct LabeledBatch<'a> {
    pub features: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
}

impl<'a> LabeledBatch<'a> {
    pub fn new(features: ArrayView2<'a, f64>, labels: &'a [usize]) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::ShapeMismatch(format!("{} feature rows but {} labels", features.nrows(), labels.len())));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub(crate) fn check_labels(&self, n_out: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= n_out) {
            Some(&l) => Err(Error::Range { value: l as i64, what: format!("label < {n_out}") }),
            None => Ok(()),
        }
    }
}

/// Logits and row-wise softmax probabilities.
pub fn forward(params: &NetworkParams, features: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    params.check_input(&features)?;
    let logits = params.forward_output(features);
    let probs = softmax(&logits);
    Ok((logits, probs))
}

/// Mean negative log-likelihood of the true labels.
pub fn cross_entropy_loss(probabilities: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if probabilities.nrows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} probability rows but {} labels",
            probabilities.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    let k = probabilities.ncols();
    let mut total = 0.0;
    for (row, &y) in probabilities.rows().into_iter().zip(labels) {
        if y >= k {
            return Err(Error::Range { value: y as i64, what: format!("label < {k}") });
        }
        total -= row[y].max(PROB_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Loss plus the gradient of the mean cross-entropy w.r.t. the logits,
/// `(softmax - onehot) / n`.
pub(crate) fn softmax_ce_grad(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let mut probs = softmax(logits);
    let n = labels.len() as f64;
    let mut loss = 0.0;
    for (mut row, &y) in probs.rows_mut().into_iter().zip(labels) {
        loss -= row[y].max(PROB_FLOOR).ln();
        row[y] -= 1.0;
    }
    probs /= n;
    (loss / n, probs)
}

/// Analytic gradient of the mean cross-entropy, shaped like `params`.
pub fn gradients(params: &NetworkParams, batch: &LabeledBatch<'_>) -> Result<NetworkParams> {
    Ok(loss_and_gradients(params, batch)?.1)
}

pub fn loss_and_gradients(params: &NetworkParams, batch: &LabeledBatch<'_>) -> Result<(f64, NetworkParams)> {
    params.check_input(&batch.features)?;
    batch.check_labels(params.output_dim())?;
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    let cache = params.forward_cached(batch.features);
    let (loss, delta) = softmax_ce_grad(cache.output(), batch.labels);
    let (grads, _) = params.backward(&cache, delta, false);
    let grads = NetworkParams::from_layers(grads, params.activation(), params.linear_top())?;
    Ok((loss, grads))
}

/// Row-wise argmax of the logits, smallest index on ties.
pub fn predict(params: &NetworkParams, features: ArrayView2<f64>) -> Result<Vec<usize>> {
    params.check_input(&features)?;
    Ok(argmax_rows(&params.forward_output(features)))
}

pub(crate) fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Shuffled mini-batch index lists for one epoch.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub(crate) fn shuffle_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    seed::rng(seed, &[SHUFFLE_STREAM])
}

/// Train a fresh network initialised from `cfg.seed`.
///
/// With a dev set, the parameters with the best dev accuracy at an epoch
/// boundary are returned (earliest epoch on ties); otherwise the final ones.
pub fn fit(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    train: &LabeledBatch<'_>,
    dev: Option<&LabeledBatch<'_>>,
) -> Result<NetworkParams> {
    spec.validate()?;
    if spec.output_dim < 2 {
        return Err(Error::ShapeMismatch("a classifier needs output_dim >= 2".into()));
    }
    let params = init_params(spec, cfg.seed)?;
    fit_from(params, cfg, train, dev)
}

pub(crate) fn fit_from(
    mut params: NetworkParams,
    cfg: &TrainConfig,
    train: &LabeledBatch<'_>,
    dev: Option<&LabeledBatch<'_>>,
) -> Result<NetworkParams> {
    cfg.validate()?;
    params.check_input(&train.features)?;
    train.check_labels(params.output_dim())?;
    if let Some(d) = dev {
        params.check_input(&d.features)?;
        d.check_labels(params.output_dim())?;
    }
    if cfg.epochs == 0 {
        return Ok(params);
    }
    if train.is_empty() {
        return Err(Error::EmptyInput);
    }

    let mut opt = Optimizer::new(cfg.optimizer, params.layers());
    let mut rng = shuffle_rng(cfg.seed);
    let mut best: Option<(f64, NetworkParams)> = None;
    let mut iteration = 0;
    for epoch in 0..cfg.epochs {
        for idx in epoch_batches(train.len(), cfg.batch_size, &mut rng) {
            let x = train.features.select(Axis(0), &idx);
            let y: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let cache = params.forward_cached(x.view());
            let (loss, delta) = softmax_ce_grad(cache.output(), &y);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { learner: None });
            }
            let (mut grads, _) = params.backward(&cache, delta, false);
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            opt.step(params.layers_mut(), &grads, cfg.lr_for(epoch, iteration));
            iteration += 1;
        }
        if !params.is_finite() {
            return Err(Error::NonFiniteLoss { learner: None });
        }
        if let Some(d) = dev {
            let acc = accuracy(&predict(&params, d.features)?, d.labels);
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, params.clone()));
            }
        }
    }
    Ok(best.map_or(params, |(_, p)| p))
}

#[cfg(test)]
mod tests;
