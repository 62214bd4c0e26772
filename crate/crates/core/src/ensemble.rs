//! Ensemble training and prediction.
//!
//! Every base learner `k` is trained on the labels of column `k` of the
//! coding matrix. Three parameter-sharing layouts are supported:
//!
//! * `no_share`: each learner is a complete network trained from scratch
//!   with its own seed. Learners train in parallel.
//! * `partial_share`: the bottom `shared_layer_count` feature layers form a
//!   trunk common to all learners; upper feature layers and the classifier
//!   are per learner.
//! * `full_share`: every feature layer is in the trunk; only classifiers are
//!   per learner.
//!
//! Trunks are initialised from a single network pretrained on the original
//! classes and then fine-tuned jointly: one loop over shared mini-batches,
//! loss summed over heads, trunk gradient accumulated in column order.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coding::{CodingMatrix, MetaPartition};
use crate::data::Dataset;
use crate::decoding::{decode_codes, DecodeResult};
use crate::learners::{
    self, argmax_rows, clip_global_norm, epoch_batches, init_layers, read_layers, softmax_ce_grad, write_layers, Dense,
    LabeledBatch, NetworkParams, NetworkSpec, Optimizer, TrainConfig,
};
use crate::seed;
use crate::{Error, Result};

const LEARNER_STREAM: u64 = 0x1ea2;
const PRETRAIN_STREAM: u64 = 0x9e7a;
const JOINT_STREAM: u64 = 0x7017;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareKind {
    NoShare,
    PartialShare,
    FullShare,
}

impl ShareKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ShareKind::NoShare => "no_share",
            ShareKind::PartialShare => "partial_share",
            ShareKind::FullShare => "full_share",
        }
    }
}

impl std::fmt::Display for ShareKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ShareKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_share" => Ok(ShareKind::NoShare),
            "partial_share" => Ok(ShareKind::PartialShare),
            "full_share" => Ok(ShareKind::FullShare),
            other => Err(Error::InvalidStrategy(format!("unknown sharing kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharingStrategy {
    pub kind: ShareKind,
    /// Trunk depth for `partial_share`; ignored otherwise.
    pub shared_layer_count: usize,
}

impl SharingStrategy {
    pub fn no_share() -> Self {
        Self { kind: ShareKind::NoShare, shared_layer_count: 0 }
    }

    pub fn full_share() -> Self {
        Self { kind: ShareKind::FullShare, shared_layer_count: 0 }
    }

    pub fn partial_share(shared_layer_count: usize) -> Self {
        Self { kind: ShareKind::PartialShare, shared_layer_count }
    }

    /// `kind` with the default trunk depth for `spec`: partial sharing keeps
    /// the top feature layer task-specific.
    pub fn for_kind(kind: ShareKind, spec: &NetworkSpec) -> Self {
        match kind {
            ShareKind::NoShare => Self::no_share(),
            ShareKind::FullShare => Self::full_share(),
            ShareKind::PartialShare => Self::partial_share(spec.feature_layers().saturating_sub(1).max(1)),
        }
    }

    /// Number of bottom layers in the shared trunk.
    pub fn trunk_depth(&self, spec: &NetworkSpec) -> Result<usize> {
        let hidden = spec.feature_layers();
        match self.kind {
            ShareKind::NoShare => Ok(0),
            ShareKind::FullShare if hidden == 0 => {
                Err(Error::InvalidStrategy("full_share needs at least one hidden layer".into()))
            }
            ShareKind::FullShare => Ok(hidden),
            ShareKind::PartialShare => {
                let k = self.shared_layer_count;
                if k == 0 || k > hidden {
                    Err(Error::InvalidStrategy(format!(
                        "partial_share needs 1 <= shared_layer_count <= {hidden}, got {k}"
                    )))
                } else {
                    Ok(k)
                }
            }
        }
    }
}

/// Trainable scalar counts of the three layouts for one spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCountReport {
    pub n_no_share: usize,
    pub n_partial_share: usize,
    pub n_full_share: usize,
}

pub fn parameter_counts(
    spec: &NetworkSpec,
    n_learners: usize,
    shared_layer_count: usize,
    n_meta: usize,
) -> Result<ParamCountReport> {
    let spec = spec.with_output_dim(n_meta);
    spec.validate()?;
    let hidden = spec.feature_layers();
    if shared_layer_count == 0 || shared_layer_count > hidden {
        return Err(Error::InvalidStrategy(format!(
            "shared_layer_count must lie in 1..={hidden}, got {shared_layer_count}"
        )));
    }
    let per_layer: Vec<usize> = spec.layer_shapes().iter().map(|(i, o)| i * o + o).collect();
    let split = |s: usize| -> usize {
        per_layer[..s].iter().sum::<usize>() + n_learners * per_layer[s..].iter().sum::<usize>()
    };
    Ok(ParamCountReport {
        n_no_share: split(0),
        n_partial_share: split(shared_layer_count),
        n_full_share: split(hidden),
    })
}

/// Map original labels to 0-based meta-labels of one column.
pub fn relabel(labels: &[usize], partition: &MetaPartition) -> Result<Vec<usize>> {
    let map = partition.class_to_meta();
    labels
        .iter()
        .map(|&l| {
            map.get(l)
                .map(|&m| m as usize - 1)
                .ok_or(Error::Range { value: l as i64, what: format!("class label < {}", map.len()) })
        })
        .collect()
}

pub fn evaluate_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch { expected: labels.len(), actual: predictions.len() });
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(learners::accuracy(predictions, labels))
}

/// Train one network on the original classes. Its bottom layers seed the
/// shared trunk.
pub fn pretrain_single(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    train: &Dataset,
    dev: Option<&Dataset>,
) -> Result<NetworkParams> {
    let spec = spec.with_output_dim(train.n_classes());
    let dev_batch = dev.map(Dataset::batch);
    learners::fit(&spec, cfg, &train.batch(), dev_batch.as_ref())
}

#[derive(Debug, Clone, Default)]
pub struct EnsembleOptions {
    /// Epochs of joint fine-tuning for shared strategies; `cfg.epochs` if unset.
    pub finetune_epochs: Option<usize>,
    /// Pretrained single model to take the trunk from. When unset one is
    /// trained with a seed derived from `cfg.seed`.
    pub pretrained: Option<NetworkParams>,
}

/// A trained ensemble: coding matrix, optional shared trunk and one head
/// per column.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub matrix: CodingMatrix,
    pub strategy: SharingStrategy,
    /// Shared bottom layers; `None` for `no_share`.
    pub trunk: Option<NetworkParams>,
    /// Per-learner parameters. Under `no_share` each head is a full network.
    pub heads: Vec<NetworkParams>,
    pub spec: NetworkSpec,
    pub n_meta: usize,
    pub base_seed: u64,
    pub learner_seeds: Vec<u64>,
}

fn learner_seed(base: u64, k: usize) -> u64 {
    seed::derive(base, &[LEARNER_STREAM, k as u64])
}

fn with_learner(e: Error, k: usize) -> Error {
    match e {
        Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { learner: Some(k) },
        other => other.context(format!("learner {k}")),
    }
}

pub fn train_ensemble(
    train: &Dataset,
    dev: Option<&Dataset>,
    matrix: &CodingMatrix,
    strategy: SharingStrategy,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    opts: &EnsembleOptions,
) -> Result<EnsembleModel> {
    if train.n_classes() > matrix.n_classes() {
        return Err(Error::ShapeMismatch(format!(
            "dataset has {} classes, coding matrix {}",
            train.n_classes(),
            matrix.n_classes()
        )));
    }
    if spec.input_dim != train.dims() {
        return Err(Error::ShapeMismatch(format!(
            "spec input_dim {} but dataset has {} features",
            spec.input_dim,
            train.dims()
        )));
    }
    cfg.validate()?;
    let depth = strategy.trunk_depth(spec)?;
    let n_learners = matrix.n_learners();
    let n_meta = matrix.n_meta();
    let head_spec = spec.with_output_dim(n_meta);
    head_spec.validate()?;

    let partitions: Vec<MetaPartition> = (0..n_learners).map(|k| matrix.partition(k)).collect::<Result<_>>()?;
    let train_labels: Vec<Vec<usize>> = partitions.iter().map(|p| relabel(train.labels(), p)).collect::<Result<_>>()?;
    let dev_labels: Option<Vec<Vec<usize>>> =
        dev.map(|d| partitions.iter().map(|p| relabel(d.labels(), p)).collect::<Result<_>>()).transpose()?;
    let learner_seeds: Vec<u64> = (0..n_learners).map(|k| learner_seed(cfg.seed, k)).collect();

    let (trunk, heads) = if depth == 0 {
        let heads = (0..n_learners)
            .into_par_iter()
            .map(|k| {
                let tb = LabeledBatch::new(train.features().view(), &train_labels[k])?;
                let db = match (dev, &dev_labels) {
                    (Some(d), Some(dl)) => Some(LabeledBatch::new(d.features().view(), &dl[k])?),
                    _ => None,
                };
                learners::fit(&head_spec, &cfg.with_seed(learner_seeds[k]), &tb, db.as_ref())
                    .map_err(|e| with_learner(e, k))
            })
            .collect::<Result<Vec<_>>>()?;
        (None, heads)
    } else {
        let pretrained = match &opts.pretrained {
            Some(p) => {
                if p.input_dim() != spec.input_dim || p.layers().len() != spec.layer_shapes().len() {
                    return Err(Error::ShapeMismatch("pretrained network does not match spec".into()));
                }
                p.clone()
            }
            None => pretrain_single(spec, &cfg.with_seed(seed::derive(cfg.seed, &[PRETRAIN_STREAM])), train, dev)?,
        };
        let (trunk, _) = pretrained.split_at(depth);
        let head_shapes = &head_spec.layer_shapes()[depth..];
        let heads = learner_seeds
            .iter()
            .map(|&s| NetworkParams::from_layers(init_layers(head_shapes, spec.init_scale, s), spec.activation, true))
            .collect::<Result<Vec<_>>>()?;
        let mut joint = JointTrainer::new(trunk, heads, cfg);
        let epochs = opts.finetune_epochs.unwrap_or(cfg.epochs);
        joint.run(train, &train_labels, dev.map(|d| (d, matrix)), epochs)?;
        let (trunk, heads) = joint.into_parts();
        (Some(trunk), heads)
    };

    Ok(EnsembleModel {
        matrix: matrix.clone(),
        strategy,
        trunk,
        heads,
        spec: spec.clone(),
        n_meta,
        base_seed: cfg.seed,
        learner_seeds,
    })
}

/// Loss, head gradients and the gradient flowing into the trunk output.
type HeadStep = (f64, Vec<Dense>, Array2<f64>);

/// Hard-parameter-sharing fine-tuning state.
pub(crate) struct JointTrainer {
    trunk: NetworkParams,
    heads: Vec<NetworkParams>,
    trunk_opt: Optimizer,
    head_opts: Vec<Optimizer>,
    cfg: TrainConfig,
}

impl JointTrainer {
    pub fn new(trunk: NetworkParams, heads: Vec<NetworkParams>, cfg: &TrainConfig) -> Self {
        let trunk_opt = Optimizer::new(cfg.optimizer, trunk.layers());
        let head_opts = heads.iter().map(|h| Optimizer::new(cfg.optimizer, h.layers())).collect();
        Self { trunk, heads, trunk_opt, head_opts, cfg: cfg.clone() }
    }

    pub fn into_parts(self) -> (NetworkParams, Vec<NetworkParams>) {
        (self.trunk, self.heads)
    }

    fn run(
        &mut self,
        train: &Dataset,
        labels: &[Vec<usize>],
        dev: Option<(&Dataset, &CodingMatrix)>,
        epochs: usize,
    ) -> Result<()> {
        if epochs == 0 {
            return Ok(());
        }
        if train.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut rng = learners::shuffle_rng(seed::derive(self.cfg.seed, &[JOINT_STREAM]));
        let mut best: Option<(f64, NetworkParams, Vec<NetworkParams>)> = None;
        let mut iteration = 0;
        for epoch in 0..epochs {
            for idx in epoch_batches(train.len(), self.cfg.batch_size, &mut rng) {
                let lr = self.cfg.lr_for(epoch, iteration);
                self.step(train.features().view(), labels, &idx, lr, None)?;
                iteration += 1;
            }
            if let Some((d, matrix)) = dev {
                let codes = codes_from(Some(&self.trunk), &self.heads, d.features().view());
                let pred = decode_code_rows(matrix, &codes)?;
                let acc = learners::accuracy(&pred, d.labels());
                if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                    best = Some((acc, self.trunk.clone(), self.heads.clone()));
                }
            }
        }
        if let Some((_, trunk, heads)) = best {
            self.trunk = trunk;
            self.heads = heads;
        }
        Ok(())
    }

    /// One joint update on the rows `idx`. Heads whose `active` flag is
    /// false contribute no gradient anywhere and are not updated.
    pub fn step(
        &mut self,
        features: ArrayView2<f64>,
        labels: &[Vec<usize>],
        idx: &[usize],
        lr: f64,
        active: Option<&[bool]>,
    ) -> Result<f64> {
        let x = features.select(Axis(0), idx);
        let trunk_cache = self.trunk.forward_cached(x.view());
        let hidden = trunk_cache.output();

        let per_head: Vec<Option<HeadStep>> = self
            .heads
            .par_iter()
            .enumerate()
            .map(|(k, head)| {
                if active.is_some_and(|a| !a[k]) {
                    return None;
                }
                let y: Vec<usize> = idx.iter().map(|&i| labels[k][i]).collect();
                let cache = head.forward_cached(hidden.view());
                let (loss, delta) = softmax_ce_grad(cache.output(), &y);
                let (grads, input_grad) = head.backward(&cache, delta, true);
                Some((loss, grads, input_grad.expect("requested")))
            })
            .collect();

        let mut total_loss = 0.0;
        let mut trunk_out_grad = Array2::<f64>::zeros(hidden.raw_dim());
        for (k, slot) in per_head.into_iter().enumerate() {
            let Some((loss, mut grads, input_grad)) = slot else { continue };
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { learner: Some(k) });
            }
            total_loss += loss;
            trunk_out_grad += &input_grad;
            if let Some(c) = self.cfg.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            self.head_opts[k].step(self.heads[k].layers_mut(), &grads, lr);
        }

        let (mut trunk_grads, _) = self.trunk.backward(&trunk_cache, trunk_out_grad, false);
        if let Some(c) = self.cfg.grad_clip {
            clip_global_norm(&mut trunk_grads, c);
        }
        self.trunk_opt.step(self.trunk.layers_mut(), &trunk_grads, lr);
        if !self.trunk.is_finite() {
            return Err(Error::NonFiniteLoss { learner: None });
        }
        Ok(total_loss)
    }
}

/// Per-learner meta-class predictions (1-based), `samples x learners`.
fn codes_from(trunk: Option<&NetworkParams>, heads: &[NetworkParams], features: ArrayView2<f64>) -> Array2<u32> {
    let hidden = trunk.map(|t| t.forward_output(features));
    let input = hidden.as_ref().map_or(features, |h| h.view());
    let columns: Vec<Vec<usize>> = heads.par_iter().map(|h| argmax_rows(&h.forward_output(input))).collect();
    let mut codes = Array2::zeros((features.nrows(), heads.len()));
    for (k, col) in columns.iter().enumerate() {
        for (i, &c) in col.iter().enumerate() {
            codes[(i, k)] = c as u32 + 1;
        }
    }
    codes
}

/// Decode every row of a `samples x learners` code matrix.
pub fn decode_code_rows(matrix: &CodingMatrix, codes: &Array2<u32>) -> Result<Vec<usize>> {
    Ok(decode_code_rows_full(matrix, codes)?.into_iter().map(|r| r.class_index).collect())
}

fn decode_code_rows_full(matrix: &CodingMatrix, codes: &Array2<u32>) -> Result<Vec<DecodeResult>> {
    (0..codes.nrows())
        .into_par_iter()
        .map(|i| {
            let row = codes.row(i).to_vec();
            decode_codes(matrix, &row).map_err(|e| e.context(format!("sample {i}")))
        })
        .collect()
}

impl EnsembleModel {
    pub fn n_learners(&self) -> usize {
        self.heads.len()
    }

    /// Meta-class codes (1-based) predicted by every learner,
    /// `samples x learners`.
    pub fn learner_codes(&self, features: ArrayView2<f64>) -> Result<Array2<u32>> {
        if features.ncols() != self.spec.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "feature width {} does not match spec input {}",
                features.ncols(),
                self.spec.input_dim
            )));
        }
        Ok(codes_from(self.trunk.as_ref(), &self.heads, features))
    }

    /// Ensemble of the first `k` learners, sharing the trunk.
    pub fn prefix(&self, k: usize) -> Result<EnsembleModel> {
        let matrix = self.matrix.prefix(k)?;
        Ok(EnsembleModel {
            matrix,
            heads: self.heads[..k].to_vec(),
            learner_seeds: self.learner_seeds[..k].to_vec(),
            ..self.clone()
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut csv = Vec::new();
        self.matrix.write_csv(&mut csv)?;
        fs::write(dir.join(MATRIX_FILE), csv)?;
        let manifest = Manifest {
            format_version: 1,
            kind: self.strategy.kind,
            shared_layer_count: self.strategy.shared_layer_count,
            spec: self.spec.clone(),
            n_meta: self.n_meta,
            n_learners: self.heads.len(),
            has_trunk: self.trunk.is_some(),
            base_seed: self.base_seed,
            learner_seeds: self.learner_seeds.clone(),
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        if let Some(t) = &self.trunk {
            let mut buf = Vec::new();
            write_layers(t.layers(), &mut buf)?;
            fs::write(dir.join(TRUNK_FILE), buf)?;
        }
        for (k, h) in self.heads.iter().enumerate() {
            let mut buf = Vec::new();
            write_layers(h.layers(), &mut buf)?;
            fs::write(dir.join(head_file(k)), buf)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<EnsembleModel> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        let matrix = CodingMatrix::read_csv(&fs::read(dir.join(MATRIX_FILE))?[..])?;
        if matrix.n_learners() != manifest.n_learners || matrix.n_meta() != manifest.n_meta {
            return Err(Error::ShapeMismatch("manifest disagrees with coding matrix".into()));
        }
        let act = manifest.spec.activation;
        let trunk = if manifest.has_trunk {
            let layers = read_layers(&fs::read(dir.join(TRUNK_FILE))?[..])?;
            Some(NetworkParams::from_layers(layers, act, false)?)
        } else {
            None
        };
        let heads = (0..manifest.n_learners)
            .map(|k| {
                let layers = read_layers(&fs::read(dir.join(head_file(k)))?[..])?;
                NetworkParams::from_layers(layers, act, true)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EnsembleModel {
            matrix,
            strategy: SharingStrategy { kind: manifest.kind, shared_layer_count: manifest.shared_layer_count },
            trunk,
            heads,
            spec: manifest.spec,
            n_meta: manifest.n_meta,
            base_seed: manifest.base_seed,
            learner_seeds: manifest.learner_seeds,
        })
    }
}

const MATRIX_FILE: &str = "matrix.csv";
const MANIFEST_FILE: &str = "manifest.json";
const TRUNK_FILE: &str = "trunk.bin";

fn head_file(k: usize) -> String {
    format!("head_{k:04}.bin")
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: ShareKind,
    shared_layer_count: usize,
    spec: NetworkSpec,
    n_meta: usize,
    n_learners: usize,
    has_trunk: bool,
    base_seed: u64,
    learner_seeds: Vec<u64>,
}

/// Predict original classes: gather every learner's meta-class and decode
/// against the coding matrix.
pub fn predict_ensemble(model: &EnsembleModel, features: ArrayView2<f64>) -> Result<Vec<usize>> {
    let codes = model.learner_codes(features)?;
    decode_code_rows(&model.matrix, &codes)
}
