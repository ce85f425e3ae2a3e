//! Run configuration: named profiles, TOML files and their merge order.
//!
//! A configuration is resolved as profile defaults, then the TOML file (any subset of
//! keys), then command-line overrides applied by the caller. The profile is chosen first,
//! from the override, the file's `profile` key, or `desk`, in that order. `data_dir`
//! falls back to the `CRDND_DATA_DIR` environment variable when nothing else sets it.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackSpec, Objective};
use crate::data::{DatasetSource, ToyRecipe};
use crate::error::{Error, Result};
use crate::evaluation::standard_attack;
use crate::losses::{LossConfig, SimilaritySpace};
use crate::model::{Architecture, ModelSpec};
use crate::training::TrainConfig;

pub const DATA_DIR_ENV: &str = "CRDND_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Toy data, tiny-cnn, 10 epochs: minutes on one CPU core.
    #[default]
    Desk,
    /// CIFAR-10, ResNet-18, 300 epochs, batch 128.
    Paper,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::config(
                "profile",
                format!("unknown profile `{other}` (expected desk or paper)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetSource,
    pub data_dir: Option<PathBuf>,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    /// Random crop and flip on training batches; copied over `train.augment` when training.
    pub augment: bool,
}

/// Evaluation attacks. `steps`, `step_size` and `random_start` override the standard
/// parameterization of every listed attack when set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub attacks: Vec<String>,
    pub epsilon: f64,
    pub steps: Option<usize>,
    pub step_size: Option<f64>,
    pub random_start: Option<bool>,
    pub batch_size: usize,
}

impl EvalConfig {
    pub fn attack_specs(&self) -> Result<Vec<(String, AttackSpec)>> {
        self.attacks
            .iter()
            .map(|name| {
                let mut spec = standard_attack(name, self.epsilon)?;
                if let Some(steps) = self.steps {
                    spec.steps = steps;
                }
                if let Some(step_size) = self.step_size {
                    spec.step_size = step_size;
                }
                if let Some(rs) = self.random_start {
                    spec.random_start = rs;
                }
                spec.validate()?;
                Ok((name.clone(), spec))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    /// Copied over `train.seed` when training.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Frozen teacher checkpoint. When absent, `train` produces one by adversarial training.
    pub teacher: Option<PathBuf>,
    /// Epochs of adversarial training when a teacher has to be produced.
    pub teacher_epochs: usize,
    /// Initial learning rate of that teacher run; the rest of its schedule follows `train`.
    pub teacher_lr0: f64,
    /// Epochs over which the teacher's attack budget ramps up from zero.
    pub teacher_warmup_epochs: usize,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub toy: ToyRecipe,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let eps = 8.0 / 255.0;
        let eval = EvalConfig {
            attacks: vec!["fgsm".into(), "pgd_s".into(), "pgd_t".into()],
            epsilon: eps,
            steps: None,
            step_size: None,
            random_start: None,
            batch_size: 250,
        };
        match profile {
            Profile::Desk => RunConfig {
                profile,
                seed: 0,
                out_dir: PathBuf::from("runs/desk"),
                teacher: None,
                teacher_epochs: 5,
                teacher_lr0: 0.05,
                teacher_warmup_epochs: 3,
                model: ModelConfig {
                    architecture: Architecture::TinyCnn,
                    width: Architecture::TinyCnn.default_width(),
                },
                data: DataConfig {
                    dataset: DatasetSource::Toy,
                    data_dir: None,
                    train_subset: Some(2000),
                    test_subset: Some(500),
                    augment: false,
                },
                toy: ToyRecipe::default(),
                train: TrainConfig {
                    epochs: 10,
                    batch_size: 64,
                    lr0: 0.01,
                    loss: LossConfig {
                        space: SimilaritySpace::Logits,
                        ..LossConfig::default()
                    },
                    adversary_hold_epochs: 1,
                    adversary_ramp_epochs: 2,
                    augment: false,
                    ..TrainConfig::default()
                },
                eval,
            },
            Profile::Paper => RunConfig {
                profile,
                seed: 0,
                out_dir: PathBuf::from("runs/paper"),
                teacher: None,
                teacher_epochs: 100,
                teacher_lr0: 0.1,
                teacher_warmup_epochs: 0,
                model: ModelConfig {
                    architecture: Architecture::Resnet18,
                    width: Architecture::Resnet18.default_width(),
                },
                data: DataConfig {
                    dataset: DatasetSource::Cifar10,
                    data_dir: None,
                    train_subset: None,
                    test_subset: None,
                    augment: true,
                },
                toy: ToyRecipe::default(),
                train: TrainConfig::default(),
                eval,
            },
        }
    }

    /// Profile defaults overlaid with the keys present in `file_text`. `profile_override`
    /// takes precedence over the file's own `profile` key.
    pub fn resolve(file_text: Option<&str>, profile_override: Option<Profile>) -> Result<Self> {
        let file: Option<toml::Table> = match file_text {
            Some(text) => Some(
                text.parse()
                    .map_err(|e: toml::de::Error| Error::config("config", e.to_string()))?,
            ),
            None => None,
        };
        let file_profile = match file.as_ref().and_then(|t| t.get("profile")) {
            Some(toml::Value::String(s)) => Some(s.parse::<Profile>()?),
            Some(_) => return Err(Error::config("profile", "must be a string")),
            None => None,
        };
        let profile = profile_override.or(file_profile).unwrap_or_default();
        let defaults = RunConfig::for_profile(profile);
        let mut config = match file {
            None => defaults,
            Some(mut overlay) => {
                overlay.insert("profile".into(), toml::Value::String(profile.to_string()));
                let mut base = toml::Table::try_from(&defaults).expect("defaults serialize");
                merge(&mut base, overlay);
                toml::Value::Table(base)
                    .try_into()
                    .map_err(|e: toml::de::Error| {
                        Error::config("config", e.message().to_string())
                    })?
            }
        };
        if config.data.data_dir.is_none() {
            config.data.data_dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
        }
        Ok(config)
    }

    pub fn load(path: &Path, profile_override: Option<Profile>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::resolve(Some(&text), profile_override)
    }

    /// Effective training configuration: the run seed and `data.augment` are copied in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            augment: self.data.augment,
            ..self.train.clone()
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let (c, h, w) = (3, 32, 32);
        ModelSpec::new(self.model.architecture, self.num_classes(), (c, h, w))
            .with_width(self.model.width)
    }

    pub fn num_classes(&self) -> usize {
        match self.data.dataset {
            DatasetSource::Toy => self.toy.num_classes,
            other => other.num_classes(),
        }
    }

    /// Attack used to adversarially train a teacher: the training attack's budget and
    /// steps with a cross-entropy objective.
    pub fn teacher_attack(&self) -> AttackSpec {
        AttackSpec {
            objective: Objective::CrossEntropy,
            ..self.train.train_attack
        }
    }

    /// Schedule for producing a teacher: the student schedule with the teacher's epochs
    /// and learning rate.
    pub fn teacher_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.teacher_epochs,
            lr0: self.teacher_lr0,
            ..self.train_config()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.model_spec().validate()?;
        if self.model.width == 0 {
            return Err(Error::config("model.width", "must be at least 1"));
        }
        if self.teacher_epochs == 0 {
            return Err(Error::config("teacher_epochs", "must be at least 1"));
        }
        self.teacher_train_config().validate()?;
        if self.eval.attacks.is_empty() {
            return Err(Error::config("eval.attacks", "list at least one attack"));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::config("eval.batch_size", "must be at least 1"));
        }
        self.eval.attack_specs()?;
        if self.data.dataset == DatasetSource::Toy {
            self.toy.validate()?;
        } else if self.data.data_dir.is_none() {
            return Err(Error::config(
                "data.data_dir",
                format!(
                    "{} needs a data directory (flag, config or {DATA_DIR_ENV})",
                    self.data.dataset
                ),
            ));
        }
        for (field, v) in [
            ("data.train_subset", self.data.train_subset),
            ("data.test_subset", self.data.test_subset),
        ] {
            if v == Some(0) {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_profile_defaults() {
        let text = "seed = 7\n[train]\nepochs = 3\n[train.loss]\nlambda = 0.5\n";
        let cfg = RunConfig::resolve(Some(text), None).unwrap();
        assert_eq!(cfg.profile, Profile::Desk);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.loss.lambda, 0.5);
        assert_eq!(cfg.train.batch_size, 64);
    }

    #[test]
    fn override_profile_wins_over_file() {
        let cfg = RunConfig::resolve(Some("profile = \"desk\""), Some(Profile::Paper)).unwrap();
        assert_eq!(cfg.profile, Profile::Paper);
        assert_eq!(cfg.train.batch_size, 128);
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::for_profile(Profile::Desk);
        let again = RunConfig::resolve(Some(&cfg.to_toml()), None).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::resolve(Some("[train]\nepoch = 3\n"), None).is_err());
    }
}
