//! Single-model cross-entropy training: natural training for comparison students and
//! PGD adversarial training for desk-scale teachers.

use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, AttackSpec, Objective, Target};
use crate::data::{augment, shuffled_order, Dataset};
use crate::error::{Error, Result};
use crate::model::{softmax_rows, Mode, Model};
use crate::rng;
use crate::tensor::{argmax, Tensor};
use crate::training::{lr_at, ramp_factor, Sgd, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineKind {
    Natural,
    /// Inner maximization with `attack`, its objective forced to cross-entropy against the
    /// labels. Budget and step size ramp linearly from zero over the first
    /// `warmup_epochs` epochs.
    Adversarial {
        attack: AttackSpec,
        warmup_epochs: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineEpoch {
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
}

/// Mean cross-entropy of a batch and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor<f32>, labels: &[usize]) -> Result<(f64, Tensor<f32>, usize)> {
    let (n, k) = (logits.rows(), logits.row_len());
    let probs = softmax_rows(logits)?;
    let mut loss = 0.0;
    let mut correct = 0;
    let mut grad = Vec::with_capacity(n * k);
    for (row, &y) in probs.chunks_exact(k).zip(labels) {
        loss -= row[y].max(1e-12).ln();
        if argmax(row) == y {
            correct += 1;
        }
        grad.extend(
            row.iter()
                .enumerate()
                .map(|(j, &p)| ((p - if j == y { 1.0 } else { 0.0 }) / n as f64) as f32),
        );
    }
    Ok((loss / n as f64, Tensor::from_vec(&[n, k], grad)?, correct))
}

/// Trains `model` for `config.epochs` epochs with the schedule, optimizer, batch size,
/// augmentation and seed of `config`. Adversarial random starts use `attack/train`
/// streams, so natural and adversarial runs under one seed see identical batch orders.
pub fn train_baseline(
    model: &mut Model<f32>,
    data: &Dataset,
    config: &TrainConfig,
    kind: BaselineKind,
) -> Result<Vec<BaselineEpoch>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let per_epoch = config.steps_per_epoch(data.len());
    let total = per_epoch * config.epochs as u64;
    let mut opt = Sgd::new(model.params(), config.momentum, config.weight_decay);
    let mut step = 0u64;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs as u64 {
        let order = shuffled_order(data.len(), config.seed, epoch);
        let (mut loss_sum, mut correct, mut lr) = (0.0, 0usize, 0.0);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut batch = data.batch(chunk);
            if config.augment {
                let mut aug_rng = rng::stream(config.seed, rng::AUGMENT, &[epoch, b as u64]);
                batch.images = augment(&batch.images, &mut aug_rng);
            }
            let inputs = match kind {
                BaselineKind::Natural => batch.images,
                BaselineKind::Adversarial {
                    attack,
                    warmup_epochs,
                } => {
                    let spec = AttackSpec {
                        objective: Objective::CrossEntropy,
                        ..attack
                    }
                    .scaled(ramp_factor(step, per_epoch, 0, warmup_epochs))
                    .expect("ramp without hold is positive");
                    let mut attack_rng =
                        rng::stream(config.seed, rng::ATTACK_TRAIN, &[epoch, b as u64]);
                    pgd(
                        model,
                        &batch.images,
                        Target::Labels(&batch.labels),
                        &spec,
                        &mut attack_rng,
                    )?
                }
            };
            let pass = model.forward(&inputs, Mode::Train)?;
            let (loss, grad_logits, hits) = cross_entropy(&pass.logits, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    batch: b,
                    detail: format!("epoch {epoch}: cross-entropy {loss}"),
                });
            }
            let mut grads = model.params().zeros_like();
            model.backward(&pass, &grad_logits, Some(&mut grads), false)?;
            lr = lr_at(step, total, config.lr0)?;
            opt.step(model.params_mut(), &grads, lr);
            model.apply_bn_updates(pass.bn_updates());
            step += 1;
            loss_sum += loss * batch.labels.len() as f64;
            correct += hits;
        }
        let row = BaselineEpoch {
            epoch,
            lr,
            loss: loss_sum / data.len() as f64,
            train_acc: 100.0 * correct as f64 / data.len() as f64,
        };
        ::log::info!(
            "{} epoch {epoch}: loss {:.4}, train acc {:.2}%",
            match kind {
                BaselineKind::Natural => "natural",
                BaselineKind::Adversarial { .. } => "adversarial",
            },
            row.loss,
            row.train_acc
        );
        log.push(row);
    }
    Ok(log)
}
