//! Deterministic mini-batch training and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{argmax, batch_loss_grad, ParamSet};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::models::{build_model, Architecture, Classifier, EmbeddingTable, Encoded, ModelSpec};
use crate::tensor::Tensor;

/// Floor applied to log-probabilities when reporting a loss.
pub const LOG_PROB_FLOOR: f64 = -27.631_021_115_928_547; // ln(1e-12)

pub(crate) fn cross_entropy_value(log_prob: f64) -> f64 {
    -log_prob.max(LOG_PROB_FLOOR)
}

/// `-log p(label)`, with the log-probability clamped at `ln 1e-12`.
pub fn cross_entropy(logprobs: &Tensor, label: usize) -> Result<f64> {
    let lp = logprobs.data();
    if label >= lp.len() {
        return Err(Error::ClassIndex {
            index: label,
            classes: lp.len(),
        });
    }
    Ok(cross_entropy_value(lp[label]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    /// Examples per update; values larger than the train split mean full batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub valid_fraction: f64,
    /// Stop after this many epochs without a validation-accuracy improvement.
    pub patience: Option<usize>,
}

impl TrainConfig {
    /// Adam (lr 1e-3), batch 32, 5 epochs.
    pub fn text_cnn() -> Self {
        TrainConfig {
            optimizer: Optimizer::adam(1e-3),
            batch_size: 32,
            epochs: 5,
            seed: 0,
            valid_fraction: 0.1,
            patience: None,
        }
    }

    /// Full-batch SGD (lr 0.1) for 200 epochs.
    pub fn synthetic_mlp() -> Self {
        TrainConfig {
            optimizer: Optimizer::Sgd { lr: 0.1 },
            batch_size: usize::MAX,
            epochs: 200,
            seed: 0,
            valid_fraction: 0.1,
            patience: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.valid_fraction > 0.0 && self.valid_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "valid_fraction {} not in (0, 1)",
                self.valid_fraction
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be positive".into(),
            ));
        }
        let lr = match self.optimizer {
            Optimizer::Sgd { lr } | Optimizer::Adam { lr, .. } => lr,
        };
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {lr}")));
        }
        Ok(())
    }
}

/// Per-parameter optimizer state.
pub struct OptimizerState {
    optimizer: Optimizer,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(optimizer: Optimizer, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        OptimizerState {
            optimizer,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.step += 1;
        match self.optimizer {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads.iter()) {
                    for (w, d) in p.value.data_mut().iter_mut().zip(g.value.data()) {
                        *w -= lr * d;
                    }
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (k, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
                    let (m, v) = (&mut self.first[k], &mut self.second[k]);
                    for (i, (w, d)) in p.value.data_mut().iter_mut().zip(g.value.data()).enumerate()
                    {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * d;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * d * d;
                        *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean minibatch loss during the epoch (dropout active).
    pub train_loss: f64,
    /// Accuracy of the training-mode predictions made during the epoch.
    pub train_accuracy: f64,
    pub valid_loss: f64,
    pub valid_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_valid_accuracy: f64,
    pub n_train: usize,
    pub n_valid: usize,
    /// Examples dropped because they could not be encoded.
    pub skipped: Vec<String>,
    pub seed: u64,
}

/// SplitMix64 finaliser over a sequence of words; keys the dropout streams.
fn mix_key(words: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &w in words {
        h ^= w;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Trains a model from scratch and returns the epoch with the best
/// validation accuracy.
///
/// The data are shuffled with `cfg.seed` and split into train and validation
/// parts; every epoch reshuffles the train part with a stream keyed by
/// `(seed, epoch)` and dropout masks come from streams keyed by
/// `(seed, epoch, batch, position)`. Identical inputs give identical models
/// regardless of thread count.
pub fn train(
    spec: &ModelSpec,
    data: &[Example],
    cfg: &TrainConfig,
    embeddings: Option<EmbeddingTable>,
) -> Result<(Classifier, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training data".into()));
    }
    let c = spec.num_classes;
    if let Some(bad) = data.iter().find(|e| e.label >= c) {
        return Err(Error::ClassIndex {
            index: bad.label,
            classes: c,
        });
    }
    let mut present = vec![false; c];
    data.iter().for_each(|e| present[e.label] = true);
    if present.iter().filter(|p| **p).count() < 2 {
        return Err(Error::InvalidConfig(
            "training data contains a single class".into(),
        ));
    }

    let mut model = build_model(spec, cfg.seed)?;
    if let Some(table) = &embeddings {
        model.set_vocab_hash(Some(table.fingerprint()));
    }
    let clf = Classifier::new(model, embeddings)?;

    let mut skipped = Vec::new();
    let mut encoded: Vec<(Encoded, usize)> = Vec::with_capacity(data.len());
    for ex in data {
        match clf.encode(&ex.input) {
            Ok(e) => encoded.push((e, ex.label)),
            Err(err) => {
                log::warn!("skipping example {}: {err}", ex.id);
                skipped.push(ex.id.clone());
            }
        }
    }
    if encoded.len() < 2 {
        return Err(Error::Empty("fewer than two usable training examples".into()));
    }

    let mut order: Vec<usize> = (0..encoded.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_valid = ((encoded.len() as f64 * cfg.valid_fraction).round() as usize)
        .clamp(1, encoded.len() - 1);
    let (valid_idx, train_idx) = order.split_at(n_valid);
    let valid_idx = valid_idx.to_vec();
    let mut train_idx = train_idx.to_vec();

    let uses_dropout = matches!(
        spec.architecture,
        Architecture::TextCnn { dropout, .. } if dropout > 0.0
    );
    let (mut model, embeddings) = clf.into_parts();
    let graph = model.graph().clone();
    let mut state = OptimizerState::new(cfg.optimizer, model.params());
    let mut best_params = model.params().clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let batch_size = cfg.batch_size.min(train_idx.len());

    for epoch in 0..cfg.epochs {
        train_idx.sort_unstable();
        train_idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_key(&[
            cfg.seed,
            epoch as u64,
        ])));
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, chunk) in train_idx.chunks(batch_size).enumerate() {
            let inputs: Vec<Tensor> = chunk.iter().map(|&i| encoded[i].0.tensor.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| encoded[i].1).collect();
            let seed = cfg.seed;
            let (grads, loss, preds) =
                batch_loss_grad(&graph, &inputs, &labels, model.params(), |pos| {
                    uses_dropout.then(|| {
                        ChaCha8Rng::seed_from_u64(mix_key(&[
                            seed,
                            epoch as u64,
                            b as u64,
                            pos as u64,
                        ]))
                    })
                })?;
            state.step(model.params_mut(), &grads);
            loss_sum += loss * chunk.len() as f64;
            correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        let (valid_loss, valid_accuracy) = loss_and_accuracy(&model, &encoded, &valid_idx)?;
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            train_accuracy: correct as f64 / train_idx.len() as f64,
            valid_loss,
            valid_accuracy,
        });
        log::info!(
            "epoch {epoch}: train loss {:.4}, valid acc {valid_accuracy:.4}",
            loss_sum / train_idx.len() as f64
        );
        if valid_accuracy > best_acc {
            best_acc = valid_accuracy;
            best_epoch = epoch;
            best_params = model.params().clone();
        } else if let Some(p) = cfg.patience {
            if epoch - best_epoch >= p {
                break;
            }
        }
    }

    *model.params_mut() = best_params;
    let report = TrainReport {
        epochs: history,
        best_epoch,
        best_valid_accuracy: best_acc,
        n_train: train_idx.len(),
        n_valid: valid_idx.len(),
        skipped,
        seed: cfg.seed,
    };
    Ok((Classifier::new(model, embeddings)?, report))
}

fn loss_and_accuracy(
    model: &crate::models::Model,
    encoded: &[(Encoded, usize)],
    idx: &[usize],
) -> Result<(f64, f64)> {
    let results: Vec<Result<(f64, bool)>> = idx
        .par_iter()
        .map(|&i| {
            let (enc, label) = &encoded[i];
            let lp = model.log_probs(&enc.tensor)?;
            Ok((
                cross_entropy(&lp, *label)?,
                argmax(lp.data()) == *label,
            ))
        })
        .collect();
    let mut loss = 0.0;
    let mut correct = 0;
    for r in results {
        let (l, ok) = r?;
        loss += l;
        correct += ok as usize;
    }
    let n = idx.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Fraction of examples whose argmax prediction equals the label. Examples
/// that cannot be encoded count as wrong.
pub fn evaluate(clf: &Classifier, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation data".into()));
    }
    let correct: usize = data
        .par_iter()
        .map(|ex| {
            clf.encode(&ex.input)
                .and_then(|enc| clf.model().log_probs(&enc.tensor))
                .map(|lp| (argmax(lp.data()) == ex.label) as usize)
                .unwrap_or(0)
        })
        .sum();
    Ok(correct as f64 / data.len() as f64)
}
