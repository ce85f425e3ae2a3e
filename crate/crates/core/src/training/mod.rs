//! The distillation training loop.
//!
//! Each batch runs, in order: training adversary, frozen-teacher forward on `x` and `x'`,
//! tally update and noise-matrix rebuild, student forward on both inputs, the contrastive
//! objective with any ablation applied, and one SGD step at the scheduled learning rate.
//!
//! Tallies restart every epoch. Classes not yet seen in the current epoch take the
//! previous epoch's final accuracy (1.0 before the first epoch, i.e. identity matrices).

pub mod baseline;
mod log;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attacks::{training_adversary, AttackSpec};
use crate::data::{augment, shuffled_order, Dataset, ImageBatch};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_clean, evaluate_under_attack, EvalOptions};
use crate::losses::{
    objective_from_logits, LossBreakdown, LossConfig, LossWeights, SimilaritySpace, StudentLogits,
};
use crate::model::checkpoint::{save_checkpoint, Checkpoint, RngState};
use crate::model::{softmax_rows, Gradients, Mode, Model, ParamKind, ParameterSet};
use crate::noise::{AccuracyMode, AccuracyTally, NoiseMatrix, Scenario};
use crate::rng;
use crate::tensor::{argmax, Tensor};

pub use log::{read_log, write_log, EpochLog};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";

/// Which parts of the method a run switches off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Identity noise matrices.
    NoAcm,
    /// Natural term dropped, adversarial term at weight 1.
    NoNat,
    /// Adversarial term dropped, natural term at weight 1.
    NoAdv,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::None,
        Ablation::NoAcm,
        Ablation::NoNat,
        Ablation::NoAdv,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoAcm => "no_acm",
            Ablation::NoNat => "no_nat",
            Ablation::NoAdv => "no_adv",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "full" => Ok(Ablation::None),
            "no_acm" => Ok(Ablation::NoAcm),
            "no_nat" => Ok(Ablation::NoNat),
            "no_adv" => Ok(Ablation::NoAdv),
            other => Err(Error::config(
                "ablation",
                format!("unknown mode `{other}` (expected none, no_acm, no_nat or no_adv)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub loss: LossConfig,
    pub train_attack: AttackSpec,
    /// Epochs at the start of a run during which the training adversary is off (x' = x).
    pub adversary_hold_epochs: usize,
    /// Epochs after the hold over which the adversary's budget and step size grow linearly
    /// to their configured values.
    pub adversary_ramp_epochs: usize,
    pub selection_attack: AttackSpec,
    pub seed: u64,
    pub ablation: Ablation,
    pub accuracy_mode: AccuracyMode,
    pub augment: bool,
    pub eval_every: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 128,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
            schedule: Schedule::Cosine,
            loss: LossConfig::default(),
            train_attack: AttackSpec::training(8.0 / 255.0),
            adversary_hold_epochs: 0,
            adversary_ramp_epochs: 0,
            selection_attack: AttackSpec::pgd_t(8.0 / 255.0),
            seed: 0,
            ablation: Ablation::None,
            accuracy_mode: AccuracyMode::PerClass,
            augment: true,
            eval_every: 1,
            eval_batch_size: 250,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(
                "lr0",
                format!("{} must be a positive finite number", self.lr0),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(
                "momentum",
                format!("{} is outside [0, 1)", self.momentum),
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(
                "weight_decay",
                "must be a non-negative finite number",
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::config("eval_batch_size", "must be at least 1"));
        }
        self.loss.validate()?;
        self.train_attack.validate()?;
        self.selection_attack.validate()
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> u64 {
        train_len.div_ceil(self.batch_size) as u64
    }

    /// Training adversary at optimizer step `step`, or `None` while it is held off.
    pub fn adversary_at(&self, step: u64, steps_per_epoch: u64) -> Option<AttackSpec> {
        self.train_attack.scaled(ramp_factor(
            step,
            steps_per_epoch,
            self.adversary_hold_epochs,
            self.adversary_ramp_epochs,
        ))
    }
}

/// 0 during the hold, then (s + 1) / ramp_steps for the s-th step of the ramp, then 1.
pub fn ramp_factor(step: u64, steps_per_epoch: u64, hold_epochs: usize, ramp_epochs: usize) -> f64 {
    let hold = steps_per_epoch * hold_epochs as u64;
    let ramp = steps_per_epoch * ramp_epochs as u64;
    if step < hold {
        0.0
    } else if step - hold < ramp {
        (step - hold + 1) as f64 / ramp as f64
    } else {
        1.0
    }
}

/// Cosine annealing from `lr0` at step 0 to zero at step `total`.
pub fn lr_at(step: u64, total: u64, lr0: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::config(
            "total_steps",
            "schedule length must be positive",
        ));
    }
    if step > total {
        return Err(Error::InvalidInput(format!(
            "step {step} is past the schedule end {total}"
        )));
    }
    let t = step as f64 / total as f64;
    Ok(lr0 * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0)
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
/// `g = grad + wd * p; buf = mu * buf + g; p -= lr * buf`. Buffers (batch-norm running
/// statistics) are not touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Tensor<f32>>,
}

impl Sgd {
    pub fn new(params: &ParameterSet<f32>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            buffers: params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }

    pub fn with_buffers(momentum: f64, weight_decay: f64, buffers: Vec<Tensor<f32>>) -> Self {
        Sgd {
            momentum,
            weight_decay,
            buffers,
        }
    }

    pub fn buffers(&self) -> &[Tensor<f32>] {
        &self.buffers
    }

    pub fn step(&mut self, params: &mut ParameterSet<f32>, grads: &Gradients<f32>, lr: f64) {
        let (mu, wd, lr) = (self.momentum as f32, self.weight_decay as f32, lr as f32);
        for (i, param) in params.iter_mut().enumerate() {
            if param.kind != ParamKind::Weight {
                continue;
            }
            let buf = self.buffers[i].data_mut();
            for ((p, &g), b) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(grads.tensor(i).data())
                .zip(buf)
            {
                *b = mu * *b + g + wd * *p;
                *p -= lr * *b;
            }
        }
    }
}

/// Noise matrices and loss weights after applying an ablation mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Effective {
    pub m1: NoiseMatrix,
    pub m2: NoiseMatrix,
    pub weights: LossWeights,
}

pub fn apply_ablation(
    mode: Ablation,
    m1: &NoiseMatrix,
    m2: &NoiseMatrix,
    loss: &LossConfig,
) -> Effective {
    let k = m1.k();
    let (m1, m2) = match mode {
        Ablation::NoAcm => (NoiseMatrix::identity(k), NoiseMatrix::identity(k)),
        _ => (m1.clone(), m2.clone()),
    };
    let weights = match mode {
        Ablation::NoNat => LossWeights { nat: 0.0, adv: 1.0 },
        Ablation::NoAdv => LossWeights { nat: 1.0, adv: 0.0 },
        _ => loss.weights(),
    };
    Effective { m1, m2, weights }
}

/// Everything that changes while training a student.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub student: Model<f32>,
    pub optimizer: Sgd,
    /// Number of completed epochs.
    pub epoch: u64,
    /// Number of completed optimizer steps.
    pub step: u64,
    pub tally_nat: AccuracyTally,
    pub tally_adv: AccuracyTally,
    pub m1: NoiseMatrix,
    pub m2: NoiseMatrix,
    pub carried_nat: Vec<f64>,
    pub carried_adv: Vec<f64>,
    /// Best selection-attack accuracy so far and the epoch it was reached.
    pub best: Option<(f64, u64)>,
    pub seed: u64,
}

impl TrainState {
    pub fn new(student: Model<f32>, config: &TrainConfig) -> Self {
        let k = student.num_classes();
        let optimizer = Sgd::new(student.params(), config.momentum, config.weight_decay);
        TrainState {
            student,
            optimizer,
            epoch: 0,
            step: 0,
            tally_nat: AccuracyTally::new(k, Scenario::Natural),
            tally_adv: AccuracyTally::new(k, Scenario::Adversarial),
            m1: NoiseMatrix::identity(k),
            m2: NoiseMatrix::identity(k),
            carried_nat: vec![1.0; k],
            carried_adv: vec![1.0; k],
            best: None,
            seed: config.seed,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec: *self.student.spec(),
            params: self.student.params().clone(),
            momentum: self.optimizer.buffers().to_vec(),
            epoch: self.epoch,
            step: self.step,
            rng: RngState {
                master_seed: self.seed,
                seed: rng::stream_seed(self.seed, rng::SHUFFLE, &[self.epoch]),
                stream: 0,
                word_pos: 0,
            },
            m1: self.m1.entries().to_vec(),
            m2: self.m2.entries().to_vec(),
            carried_nat: self.carried_nat.clone(),
            carried_adv: self.carried_adv.clone(),
            best: self.best,
        }
    }

    /// Rebuilds the state saved at an epoch boundary.
    pub fn from_checkpoint(ckpt: Checkpoint, config: &TrainConfig) -> Result<Self> {
        let k = ckpt.spec.num_classes;
        if ckpt.rng.master_seed != config.seed {
            return Err(Error::config(
                "seed",
                format!(
                    "checkpoint was written with seed {}, config has {}",
                    ckpt.rng.master_seed, config.seed
                ),
            ));
        }
        let student = Model::from_parts(ckpt.spec, ckpt.params)?;
        if ckpt.momentum.len() != student.params().len() {
            return Err(Error::InvalidInput(
                "momentum buffers do not match the parameters".into(),
            ));
        }
        Ok(TrainState {
            student,
            optimizer: Sgd::with_buffers(config.momentum, config.weight_decay, ckpt.momentum),
            epoch: ckpt.epoch,
            step: ckpt.step,
            tally_nat: AccuracyTally::new(k, Scenario::Natural),
            tally_adv: AccuracyTally::new(k, Scenario::Adversarial),
            m1: NoiseMatrix::from_entries(k, ckpt.m1)?,
            m2: NoiseMatrix::from_entries(k, ckpt.m2)?,
            carried_nat: ckpt.carried_nat,
            carried_adv: ckpt.carried_adv,
            best: ckpt.best,
            seed: ckpt.rng.master_seed,
        })
    }

    fn begin_epoch(&mut self) -> Result<()> {
        self.tally_nat.reset();
        self.tally_adv.reset();
        self.m1 = NoiseMatrix::from_accuracies(&self.carried_nat)?;
        self.m2 = NoiseMatrix::from_accuracies(&self.carried_adv)?;
        Ok(())
    }

    fn end_epoch(&mut self, mode: AccuracyMode) {
        self.carried_nat = self.tally_nat.accuracies(mode, &self.carried_nat);
        self.carried_adv = self.tally_adv.accuracies(mode, &self.carried_adv);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub loss: LossBreakdown,
    pub lr: f64,
    pub batch_size: usize,
    pub teacher_nat_correct: usize,
    pub teacher_adv_correct: usize,
}

fn to_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn count_correct(probs: &[f64], labels: &[usize], k: usize) -> usize {
    probs
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

/// One optimizer step on `batch`. `batch_index` keys the adversary's random stream and
/// `total_steps` is the length of the learning-rate schedule.
pub fn train_step(
    state: &mut TrainState,
    teacher: &Model<f32>,
    batch: &ImageBatch,
    batch_index: u64,
    config: &TrainConfig,
    total_steps: u64,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let k = state.student.num_classes();
    let n = batch.len();
    let x = &batch.images;

    let x_adv = match config.adversary_at(state.step, total_steps / config.epochs as u64) {
        Some(spec) => {
            let mut attack_rng =
                rng::stream(state.seed, rng::ATTACK_TRAIN, &[state.epoch, batch_index]);
            training_adversary(&state.student, teacher, x, &spec, &mut attack_rng)?
        }
        None => x.clone(),
    };

    let t_nat_logits = teacher.logits(x)?;
    let t_adv_logits = teacher.logits(&x_adv)?;
    let t_nat_probs = softmax_rows(&t_nat_logits)?;
    let t_adv_probs = softmax_rows(&t_adv_logits)?;

    state.tally_nat.update(&t_nat_probs, &batch.labels)?;
    state.tally_adv.update(&t_adv_probs, &batch.labels)?;
    state.m1 = NoiseMatrix::from_accuracies(
        &state
            .tally_nat
            .accuracies(config.accuracy_mode, &state.carried_nat),
    )?;
    state.m2 = NoiseMatrix::from_accuracies(
        &state
            .tally_adv
            .accuracies(config.accuracy_mode, &state.carried_adv),
    )?;
    let eff = apply_ablation(config.ablation, &state.m1, &state.m2, &config.loss);

    let pass_nat = state.student.forward(x, Mode::Train)?;
    let pass_adv = state.student.forward(&x_adv, Mode::Train)?;
    let (anchor_nat, anchor_adv) = match config.loss.space {
        SimilaritySpace::Probabilities => (t_nat_probs.clone(), t_adv_probs.clone()),
        SimilaritySpace::Logits => (to_f64(&t_nat_logits), to_f64(&t_adv_logits)),
    };
    let student_logits = StudentLogits {
        nat: &to_f64(&pass_nat.logits),
        adv: &to_f64(&pass_adv.logits),
    };
    let (loss, g_nat, g_adv) = objective_from_logits(
        k,
        student_logits,
        &anchor_nat,
        &anchor_adv,
        &eff.m1,
        &eff.m2,
        &config.loss,
        eff.weights,
    )?;
    if !loss.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            batch: batch_index as usize,
            detail: format!(
                "epoch {}, L_nat {}, L_adv {}, total {}",
                state.epoch, loss.nat, loss.adv, loss.total
            ),
        });
    }

    let mut grads = state.student.params().zeros_like();
    let to_tensor =
        |g: Vec<f64>| Tensor::from_vec(&[n, k], g.into_iter().map(|v| v as f32).collect());
    state
        .student
        .backward(&pass_nat, &to_tensor(g_nat)?, Some(&mut grads), false)?;
    state
        .student
        .backward(&pass_adv, &to_tensor(g_adv)?, Some(&mut grads), false)?;
    if !grads.all_finite() {
        return Err(Error::NonFiniteLoss {
            batch: batch_index as usize,
            detail: format!("epoch {}: non-finite parameter gradient", state.epoch),
        });
    }

    let lr = lr_at(state.step, total_steps, config.lr0)?;
    state.optimizer.step(state.student.params_mut(), &grads, lr);
    state.student.apply_bn_updates(pass_nat.bn_updates());
    state.student.apply_bn_updates(pass_adv.bn_updates());
    state.step += 1;

    Ok(StepMetrics {
        loss,
        lr,
        batch_size: n,
        teacher_nat_correct: count_correct(&t_nat_probs, &batch.labels, k),
        teacher_adv_correct: count_correct(&t_adv_probs, &batch.labels, k),
    })
}

/// Clean and selection-attack accuracy of a model on held-out data.
pub fn selection_eval(
    model: &Model<f32>,
    test: &Dataset,
    config: &TrainConfig,
    epoch: u64,
) -> Result<(f64, f64)> {
    let clean = evaluate_clean(model, test, config.eval_batch_size)?;
    let opts = EvalOptions {
        batch_size: config.eval_batch_size,
        seed: config.seed,
        label: rng::ATTACK_SELECT,
        context: epoch,
    };
    let robust = evaluate_under_attack(model, test, &config.selection_attack, &opts)?;
    Ok((clean, robust.robust))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<EpochLog>,
    /// Student parameters at the best epoch.
    pub best: Option<Checkpoint>,
}

/// Trains from `state` (fresh or resumed) until `config.epochs` epochs are complete.
/// With an output directory `out_dir`, `last.ckpt` and the CSV log are rewritten after every
/// epoch and `best.ckpt` whenever selection accuracy strictly improves.
pub fn run_training(
    config: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    teacher: &Model<f32>,
    state: TrainState,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    run_training_until(config, train, test, teacher, state, out_dir, config.epochs)
}

/// [`run_training`] stopped once `until` epochs are complete. The schedule still spans
/// `config.epochs`, so resuming the result continues the same run.
pub fn run_training_until(
    config: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    teacher: &Model<f32>,
    mut state: TrainState,
    out_dir: Option<&Path>,
    until: usize,
) -> Result<TrainOutcome> {
    config.validate()?;
    if until > config.epochs {
        return Err(Error::config(
            "epochs",
            format!(
                "cannot stop at {until}, past the last epoch {}",
                config.epochs
            ),
        ));
    }
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if teacher.num_classes() != state.student.num_classes()
        || train.num_classes() != state.student.num_classes()
    {
        return Err(Error::InvalidInput(format!(
            "class counts differ: teacher {}, student {}, data {}",
            teacher.num_classes(),
            state.student.num_classes(),
            train.num_classes()
        )));
    }
    let teacher_digest = teacher.params().digest();
    let per_epoch = config.steps_per_epoch(train.len());
    let total_steps = per_epoch * config.epochs as u64;

    let mut log_rows = Vec::new();
    let mut best_ckpt = None;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if state.epoch > 0 {
            let path = dir.join(TRAIN_LOG);
            if path.exists() {
                log_rows = read_log(&path)?;
                log_rows.retain(|r| r.epoch < state.epoch);
            }
            let best_path = dir.join(BEST_CHECKPOINT);
            if best_path.exists() {
                best_ckpt = Some(crate::model::checkpoint::load_checkpoint(&best_path)?);
            }
        }
    }

    while (state.epoch as usize) < until {
        let epoch = state.epoch;
        state.begin_epoch()?;
        let order = shuffled_order(train.len(), state.seed, epoch);
        let mut sums = LossBreakdown::default();
        let mut seen = 0usize;
        let mut lr = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut batch = train.batch(chunk);
            if config.augment {
                let mut aug_rng = rng::stream(state.seed, rng::AUGMENT, &[epoch, b as u64]);
                batch.images = augment(&batch.images, &mut aug_rng);
            }
            let m = train_step(&mut state, teacher, &batch, b as u64, config, total_steps)?;
            let w = m.batch_size as f64;
            sums.nat += w * m.loss.nat;
            sums.adv += w * m.loss.adv;
            sums.total += w * m.loss.total;
            seen += m.batch_size;
            lr = m.lr;
        }
        let eff = apply_ablation(config.ablation, &state.m1, &state.m2, &config.loss);
        state.end_epoch(config.accuracy_mode);

        let last = epoch as usize + 1 == config.epochs;
        let evaluated = (epoch as usize + 1).is_multiple_of(config.eval_every) || last;
        let (clean, robust) = if evaluated {
            let (c, r) = selection_eval(&state.student, test, config, epoch)?;
            (Some(c), Some(r))
        } else {
            (None, None)
        };
        state.epoch += 1;
        let improved = match (robust, state.best) {
            (Some(r), Some((b, _))) => r > b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            state.best = Some((robust.expect("checked"), epoch));
            let ckpt = state.to_checkpoint();
            if let Some(dir) = out_dir {
                save_checkpoint(&ckpt, &dir.join(BEST_CHECKPOINT))?;
            }
            best_ckpt = Some(ckpt);
        }

        let row = EpochLog {
            epoch,
            lr,
            loss_nat: sums.nat / seen as f64,
            loss_adv: sums.adv / seen as f64,
            loss_total: sums.total / seen as f64,
            teacher_nat_acc: state.tally_nat.overall_accuracy().unwrap_or(f64::NAN),
            teacher_adv_acc: state.tally_adv.overall_accuracy().unwrap_or(f64::NAN),
            m1_distance: eff.m1.distance_from_identity(),
            m2_distance: eff.m2.distance_from_identity(),
            m1_diagonal: log::join(&eff.m1.diagonal()),
            m2_diagonal: log::join(&eff.m2.diagonal()),
            clean_acc: clean,
            robust_acc: robust,
        };
        ::log::info!(
            "epoch {epoch}: loss {:.4} (nat {:.4}, adv {:.4}), teacher acc {:.3}/{:.3}, |M1-I| {:.4}, |M2-I| {:.4}{}",
            row.loss_total,
            row.loss_nat,
            row.loss_adv,
            row.teacher_nat_acc,
            row.teacher_adv_acc,
            row.m1_distance,
            row.m2_distance,
            match (clean, robust) {
                (Some(c), Some(r)) => format!(", clean {c:.2}%, robust {r:.2}%"),
                _ => String::new(),
            }
        );
        log_rows.push(row);
        if let Some(dir) = out_dir {
            save_checkpoint(&state.to_checkpoint(), &dir.join(LAST_CHECKPOINT))?;
            write_log(&dir.join(TRAIN_LOG), &log_rows)?;
        }
    }

    if teacher.params().digest() != teacher_digest {
        return Err(Error::Numeric(
            "teacher parameters changed during training".into(),
        ));
    }
    Ok(TrainOutcome {
        state,
        log: log_rows,
        best: best_ckpt,
    })
}
