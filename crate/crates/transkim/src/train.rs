//! Optimizer loop: adaptive moments with warmup + linear decay, per-step
//! metrics, and loud divergence detection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{HeadKind, OptimConfig, PadPolicy};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::runtime::{forward_train, TrainMode};
use crate::scalar::Scalar;
use crate::tasks::{pad_batch, Batch, Example, Label};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Fraction of total steps spent in linear warmup.
const WARMUP_FRAC: f64 = 0.05;

/// Adam with per-parameter moments; learning rate warms up linearly then
/// decays linearly toward zero.
pub struct Adam<S: Scalar> {
    lr: f64,
    warmup: usize,
    total: usize,
    t: usize,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(model: &Model<S>, lr: f64, total_steps: usize) -> Self {
        let sizes: Vec<usize> = model.named_params().iter().map(|p| p.data.len()).collect();
        Adam {
            lr,
            warmup: ((total_steps as f64 * WARMUP_FRAC).ceil() as usize).max(1),
            total: total_steps.max(1),
            t: 0,
            m: sizes.iter().map(|&s| vec![S::zero(); s]).collect(),
            v: sizes.iter().map(|&s| vec![S::zero(); s]).collect(),
        }
    }

    pub fn lr_at(&self, t: usize) -> f64 {
        let t = t as f64;
        let warm = self.warmup as f64;
        let total = self.total as f64;
        if t <= warm {
            self.lr * t / warm
        } else {
            self.lr * ((total - t + 1.0) / (total - warm + 1.0)).max(0.0)
        }
    }

    pub fn step(&mut self, model: &mut Model<S>, grads: &[Vec<S>]) {
        self.t += 1;
        let lr = S::from_f64(self.lr_at(self.t));
        let b1 = S::from_f64(BETA1);
        let b2 = S::from_f64(BETA2);
        let eps = S::from_f64(ADAM_EPS);
        let bc1 = S::from_f64(1.0 - BETA1.powi(self.t as i32));
        let bc2 = S::from_f64(1.0 - BETA2.powi(self.t as i32));
        for ((param, grad), (m, v)) in model
            .named_params_mut()
            .into_iter()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            debug_assert_eq!(param.data.len(), grad.len(), "{}", param.name);
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (S::one() - b1) * g;
                v[i] = b2 * v[i] + (S::one() - b2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                param.data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// One metrics-log record; serialized as newline-delimited JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss_total: f64,
    pub loss_downstream: f64,
    pub loss_skim: f64,
    pub acc: f64,
    pub kept_frac: Vec<f64>,
}

pub struct TrainOutcome<S: Scalar> {
    pub model: Model<S>,
    pub metrics: Vec<MetricsRecord>,
}

/// Batch accuracy from raw logit values.
pub fn batch_accuracy<S: Scalar>(logits: &[S], batch: &Batch, kind: HeadKind, n_classes: usize) -> f64 {
    match kind {
        HeadKind::SequenceClassification => {
            let mut hit = 0usize;
            for (i, label) in batch.labels.iter().enumerate() {
                let row = &logits[i * n_classes..(i + 1) * n_classes];
                let pred = argmax(row);
                if let Label::Seq(want) = label {
                    if pred == *want as usize {
                        hit += 1;
                    }
                }
            }
            hit as f64 / batch.b as f64
        }
        HeadKind::TokenClassification => {
            let mut hit = 0usize;
            let mut total = 0usize;
            for (i, label) in batch.labels.iter().enumerate() {
                if let Label::Token(per_tok) = label {
                    for (j, &want) in per_tok.iter().enumerate() {
                        let base = (i * batch.n + j) * n_classes;
                        if argmax(&logits[base..base + n_classes]) == want as usize {
                            hit += 1;
                        }
                        total += 1;
                    }
                }
            }
            if total == 0 {
                0.0
            } else {
                hit as f64 / total as f64
            }
        }
    }
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Full training run over `dataset`. Deterministic given the model, data and
/// seed: shuffling, Gumbel noise and updates all derive from `optim.seed`.
/// Divergence (epoch loss above 10x the first epoch's for 3 consecutive
/// epochs) aborts with an error.
pub fn train_loop<S: Scalar>(
    mut model: Model<S>,
    dataset: &[Example],
    optim: &OptimConfig,
    policy: PadPolicy,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome<S>> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("train_loop: empty dataset".into()));
    }
    let batch_size = if policy == PadPolicy::None {
        1
    } else {
        optim.batch_size
    };
    let steps_per_epoch = dataset.len().div_ceil(batch_size);
    let total_steps = steps_per_epoch * optim.epochs;
    let mut adam = Adam::new(&model, optim.lr, total_steps);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(optim.seed.wrapping_add(0x5eed));
    let mut metrics = Vec::new();

    let mut step = 0usize;
    let mut initial_epoch_loss: Option<f64> = None;
    let mut bad_epochs = 0usize;
    for epoch in 0..optim.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(optim.seed.wrapping_add(1000 + epoch as u64));
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0f64;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let examples: Vec<Example> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let batch = pad_batch(&examples, policy, model.config.max_len)?;
            let tf = forward_train(&model, &batch, TrainMode::SampledHard(&mut noise_rng))?;
            tf.graph.backward(&tf.result.loss_total)?;
            let grads = tf.bound.grads();
            adam.step(&mut model, &grads);
            step += 1;

            let valid = batch.valid_count();
            let kept_frac: Vec<f64> = tf
                .result
                .state
                .kept_per_layer(&batch.pad_mask)
                .iter()
                .map(|&k| k as f64 / valid as f64)
                .collect();
            let record = MetricsRecord {
                step,
                loss_total: tf.result.loss_total.item().to_f64s(),
                loss_downstream: tf.result.loss_downstream.item().to_f64s(),
                loss_skim: tf.result.loss_skim.item().to_f64s(),
                acc: batch_accuracy(
                    &tf.result.logits.data(),
                    &batch,
                    model.config.head_kind,
                    model.config.n_classes,
                ),
                kept_frac,
            };
            epoch_loss += record.loss_total;
            epoch_batches += 1;
            on_record(&record);
            metrics.push(record);
        }
        let epoch_mean = epoch_loss / epoch_batches.max(1) as f64;
        match initial_epoch_loss {
            None => initial_epoch_loss = Some(epoch_mean),
            Some(initial) => {
                if epoch_mean > 10.0 * initial {
                    bad_epochs += 1;
                    if bad_epochs >= 3 {
                        return Err(Error::Divergence(format!(
                            "epoch {epoch} mean loss {epoch_mean:.4} above 10x initial {initial:.4} \
                             for 3 consecutive epochs"
                        )));
                    }
                } else {
                    bad_epochs = 0;
                }
            }
        }
    }
    Ok(TrainOutcome { model, metrics })
}

/// Append metric records as ND-JSON.
pub fn write_metrics(path: &std::path::Path, metrics: &[MetricsRecord]) -> Result<()> {
    use std::io::Write;
    let file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in metrics {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Schema(format!("serialize metrics: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}
