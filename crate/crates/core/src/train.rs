//! Supervised training of the image classifier on an in-memory dataset.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attention::PlanStore;
use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SecVit};
use crate::nn::Linear;
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::params::ParamSet;
use crate::rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Size of the generated dataset when no IDX files are given.
    pub samples: usize,
    /// Forces one cluster in every stage, which equals dense attention.
    pub single_cluster: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.05,
            samples: 2000,
            single_cluster: false,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 {
            return Err(Error::invalid("lr must be positive and weight_decay non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// Running accuracy over the epoch's training batches.
    pub accuracy: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

pub struct Trained<T> {
    pub model: SecVit,
    pub params: ParamSet<T>,
    pub history: Vec<EpochStats>,
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::substream(seed, 1000 + epoch as u64));
    order
}

/// Generic minibatch loop; `step` builds the loss on a fresh graph and
/// returns `(loss, correct)` plus parameter gradients.
fn fit<T: Scalar>(
    params: &mut ParamSet<T>,
    data: &Dataset,
    opts: &TrainOptions,
    seed: u64,
    mut step: impl FnMut(&ParamSet<T>, Tensor<T>, &[usize]) -> Result<(f64, usize, Vec<Tensor<T>>)>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    opts.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let mut opt = AdamW::new(
        params,
        AdamWConfig {
            weight_decay: opts.weight_decay,
            ..Default::default()
        },
    );
    let per_epoch = data.len().div_ceil(opts.batch_size);
    let total = per_epoch * opts.epochs;
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let start = Instant::now();
        let order = shuffled(data.len(), seed, epoch);
        let (mut loss_sum, mut correct) = (0.0, 0);
        let mut lr = opts.lr;
        for (k, chunk) in order.chunks(opts.batch_size).enumerate() {
            let (x, labels) = data.batch::<T>(chunk)?;
            let (loss, hits, grads) = step(params, x, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step: k });
            }
            lr = cosine_lr(opts.lr, epoch * per_epoch + k, total);
            opt.step(params, &grads, lr).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { epoch, step: k },
                other => other,
            })?;
            loss_sum += loss * chunk.len() as f64;
            correct += hits;
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
            lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(history)
}

/// Trains a fresh model built from `cfg` and `seed`.
pub fn train<T: Scalar>(
    cfg: &ModelConfig,
    data: &Dataset,
    opts: &TrainOptions,
    seed: u64,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<Trained<T>> {
    let mut cfg = cfg.clone();
    if opts.single_cluster {
        cfg.stage_clusters = vec![1; cfg.num_stages()];
    }
    if data.channels != cfg.in_channels || data.height != cfg.image_size || data.width != cfg.image_size {
        return Err(Error::invalid(format!(
            "dataset images are {}×{}×{}, model expects {}×{}×{}",
            data.channels, data.height, data.width, cfg.in_channels, cfg.image_size, cfg.image_size
        )));
    }
    if data.num_classes > cfg.num_classes {
        return Err(Error::invalid(format!(
            "{} classes in the data, {} in the model",
            data.num_classes, cfg.num_classes
        )));
    }
    let mut params = ParamSet::<T>::new();
    let model = SecVit::new(&cfg, &mut params, seed)?;
    let history = fit(
        &mut params,
        data,
        opts,
        seed,
        |params, x, labels| {
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let x = g.constant(x);
            let out = model.forward(&mut g, &b, x, &mut PlanStore::new())?;
            let hits = count_hits(g.value(out.logits), labels);
            let loss = g.cross_entropy(out.logits, labels)?;
            let value = g.value(loss).data()[0].as_f64();
            let mut grads = g.backward(loss)?;
            Ok((value, hits, b.grads(&mut grads)))
        },
        on_epoch,
    )?;
    Ok(Trained {
        model,
        params,
        history,
    })
}

fn count_hits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let c = logits.last_dim();
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Classification accuracy of a trained model over `data`.
pub fn evaluate<T: Scalar>(model: &SecVit, params: &ParamSet<T>, data: &Dataset, batch: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut hits = 0;
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = data.batch::<T>(chunk)?;
        let mut g = Graph::new();
        let b = params.bind_frozen(&mut g);
        let x = g.constant(x);
        let out = model.forward(&mut g, &b, x, &mut PlanStore::new())?;
        hits += count_hits(g.value(out.logits), &labels);
    }
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// Softmax regression on raw pixels, trained with the same schedule.
/// Returns final train accuracy.
pub fn linear_probe<T: Scalar>(
    data: &Dataset,
    opts: &TrainOptions,
    seed: u64,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<f64> {
    let mut params = ParamSet::<T>::new();
    let n = data.image_len();
    let fc = Linear::new(&mut params, "probe", n, data.num_classes, true, &mut rng::seeded(seed))?;
    fit(
        &mut params,
        data,
        opts,
        seed,
        |params, x, labels| {
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let x = g.constant(x.into_reshaped(&[labels.len(), n])?);
            let logits = fc.forward(&mut g, &b, x)?;
            let hits = count_hits(g.value(logits), labels);
            let loss = g.cross_entropy(logits, labels)?;
            let value = g.value(loss).data()[0].as_f64();
            let mut grads = g.backward(loss)?;
            Ok((value, hits, b.grads(&mut grads)))
        },
        on_epoch,
    )?;
    let (x, labels) = data.batch::<T>(&(0..data.len()).collect::<Vec<_>>())?;
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let x = g.constant(x.into_reshaped(&[labels.len(), n])?);
    let logits = fc.forward(&mut g, &b, x)?;
    Ok(count_hits(g.value(logits), &labels) as f64 / labels.len() as f64)
}
