//! Teacher-forced mini-batch training.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{LossValue, LossWeights, Model, ParseTargets, TeacherForced};
use super::optim::{scheduled_lr, Adam, AdamConfig};
use super::vocab::{Question, Vocab, UNK_ID};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of all steps spent warming up.
    pub warmup: f64,
    pub weights: LossWeights,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
    pub seed: u64,
    /// Chance of replacing a rare input token with `[UNK]`.
    pub unk_prob: f64,
    /// Tokens seen at most this often count as rare.
    pub rare_count: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 6,
            batch_size: 128,
            lr: 1e-4,
            warmup: 0.01,
            weights: LossWeights::default(),
            clip_norm: 0.0,
            seed: 0,
            unk_prob: 0.0,
            rare_count: 1,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossValue,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss.total)
    }
}

fn with_unk(ids: &[usize], vocab: &Vocab, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if cfg.unk_prob <= 0.0 {
        return ids.to_vec();
    }
    ids.iter()
        .map(|&i| {
            if vocab.is_rare(i, cfg.rare_count) && rng.gen::<f64>() < cfg.unk_prob {
                UNK_ID
            } else {
                i
            }
        })
        .collect()
}

/// Trains in place. Examples lacking a gold program or tags are rejected up
/// front; a non-finite loss aborts with the offending step.
pub fn train<T: Scalar>(model: &mut Model<T>, data: &[Question], vocab: &Vocab, cfg: &TrainConfig) -> Result<TrainLog> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let targets: Vec<ParseTargets> = data
        .iter()
        .map(|q| ParseTargets::from_question(q, &model.cfg))
        .collect::<Result<_>>()?;
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.adam, &model.params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossValue::default();
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(Vec<usize>, &ParseTargets)> = chunk
                .iter()
                .map(|&i| (with_unk(&data[i].ids, vocab, cfg, &mut rng), &targets[i]))
                .collect();
            let noise_seed = rng.gen::<u64>();
            let (value, mut grads) = model.batch_loss_grads(&batch, cfg.weights, Some(noise_seed))?;
            if !value.total.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence {
                    step,
                    message: format!(
                        "loss {} (parsing {}, detection {})",
                        value.total, value.parsing, value.detection
                    ),
                });
            }
            if cfg.clip_norm > 0.0 {
                let norm = grads.norm().to_f64_lossy();
                if norm > cfg.clip_norm {
                    grads.scale(T::of(cfg.clip_norm / norm));
                }
            }
            lr = scheduled_lr(step, total, cfg.lr, cfg.warmup);
            opt.step(&mut model.params, &grads, lr);
            step += 1;
            let w = chunk.len() as f64 / data.len() as f64;
            sum.total += value.total * w;
            sum.parsing += value.parsing * w;
            sum.detection += value.detection * w;
        }
        log::info!(
            "epoch {} loss {:.4} (parsing {:.4}, detection {:.4}) lr {:.2e}",
            epoch + 1,
            sum.total,
            sum.parsing,
            sum.detection,
            lr
        );
        log.epochs.push(EpochRecord {
            epoch: epoch + 1,
            step,
            loss: sum,
            lr,
        });
    }
    Ok(log)
}

/// Teacher-forced agreement over a dataset.
pub fn teacher_forced_accuracy<T: Scalar>(model: &Model<T>, data: &[Question]) -> Result<TeacherForced> {
    use rayon::prelude::*;
    let parts: Vec<Result<TeacherForced>> = data
        .par_iter()
        .map(|q| {
            let tg = ParseTargets::from_question(q, &model.cfg)?;
            model.teacher_forced(&q.ids, &tg)
        })
        .collect();
    let mut acc = TeacherForced::default();
    for p in parts {
        acc.merge(p?);
    }
    Ok(acc)
}
