//! Command-line surface. Every run flag overrides the matching key of the resolved
//! configuration; unset flags leave it alone.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use crdnd::config::{Profile, RunConfig};
use crdnd::data::DatasetSource;
use crdnd::model::Architecture;
use crdnd::training::Ablation;

#[derive(Debug, Parser)]
#[command(
    name = "crdnd",
    version,
    about = "Contrastive relationship denoise distillation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Distil a student from a frozen robust teacher, then evaluate it.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Part of the method to switch off: none, no_acm, no_nat or no_adv.
        #[arg(long)]
        ablation: Option<Ablation>,
    },
    /// Evaluate a checkpoint on clean and attacked test data.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Model checkpoint to evaluate.
        #[arg(long, alias = "student")]
        checkpoint: PathBuf,
        /// Report path; defaults to `report.json` in the output directory.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the full method and its three ablations under one seed and compare them.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Adversarially train a teacher and save it as `teacher.ckpt`.
    MakeTeacher {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML configuration; any subset of the resolved keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named defaults: desk or paper.
    #[arg(long)]
    pub profile: Option<Profile>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// toy, cifar10 or cifar100.
    #[arg(long)]
    pub dataset: Option<DatasetSource>,
    /// Directory holding the CIFAR binary archives.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Class-balanced training subset size.
    #[arg(long, alias = "train-subset")]
    pub subset: Option<usize>,
    /// Class-balanced test subset size.
    #[arg(long)]
    pub test_subset: Option<usize>,
    #[arg(long)]
    pub no_augment: bool,
    /// tiny-cnn, resnet18 or mobilenetv2.
    #[arg(long)]
    pub arch: Option<Architecture>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate of the student.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau1: Option<f64>,
    #[arg(long)]
    pub tau2: Option<f64>,
    /// Frozen teacher checkpoint.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Produce a teacher by adversarial training even if one is configured.
    #[arg(long)]
    pub train_teacher: bool,
    #[arg(long)]
    pub teacher_epochs: Option<usize>,
    /// Run the selection evaluation every this many epochs (and after the last).
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Comma-separated evaluation attacks from fgsm, pgd_s, pgd_t.
    #[arg(long, alias = "attack", value_delimiter = ',')]
    pub attacks: Option<Vec<String>>,
    /// Evaluation budget (L-infinity).
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Overrides the step count of every evaluation attack.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overrides the step size of every evaluation attack.
    #[arg(long)]
    pub step_size: Option<f64>,
    /// Overrides the random start of every evaluation attack.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub random_start: Option<bool>,
}

impl RunArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        set(&mut cfg.out_dir, &self.out);
        set(&mut cfg.seed, &self.seed);
        set(&mut cfg.data.dataset, &self.dataset);
        if self.data_dir.is_some() {
            cfg.data.data_dir = self.data_dir.clone();
        }
        if self.subset.is_some() {
            cfg.data.train_subset = self.subset;
        }
        if self.test_subset.is_some() {
            cfg.data.test_subset = self.test_subset;
        }
        if self.no_augment {
            cfg.data.augment = false;
        }
        if let Some(arch) = self.arch {
            if arch != cfg.model.architecture && self.width.is_none() {
                cfg.model.width = arch.default_width();
            }
            cfg.model.architecture = arch;
        }
        set(&mut cfg.model.width, &self.width);
        set(&mut cfg.train.epochs, &self.epochs);
        set(&mut cfg.train.batch_size, &self.batch_size);
        set(&mut cfg.train.lr0, &self.lr);
        set(&mut cfg.train.loss.lambda, &self.lambda);
        set(&mut cfg.train.loss.tau1, &self.tau1);
        set(&mut cfg.train.loss.tau2, &self.tau2);
        if self.teacher.is_some() {
            cfg.teacher = self.teacher.clone();
        }
        if self.train_teacher {
            cfg.teacher = None;
        }
        set(&mut cfg.teacher_epochs, &self.teacher_epochs);
        set(&mut cfg.train.eval_every, &self.eval_every);
        set(&mut cfg.eval.attacks, &self.attacks);
        set(&mut cfg.eval.epsilon, &self.epsilon);
        if self.steps.is_some() {
            cfg.eval.steps = self.steps;
        }
        if self.step_size.is_some() {
            cfg.eval.step_size = self.step_size;
        }
        if self.random_start.is_some() {
            cfg.eval.random_start = self.random_start;
        }
    }
}
