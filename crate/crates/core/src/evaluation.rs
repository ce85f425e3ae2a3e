//! Clean and robust accuracy, and the structured robustness report.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, AttackSpec, Target};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng;
use crate::tensor::{argmax, Tensor};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Names accepted by `--attacks`.
pub const STANDARD_ATTACKS: [&str; 3] = ["fgsm", "pgd_s", "pgd_t"];

/// The standard parameterization of a named attack at budget `epsilon`.
pub fn standard_attack(name: &str, epsilon: f64) -> Result<AttackSpec> {
    match name {
        "fgsm" => Ok(AttackSpec::fgsm(epsilon)),
        "pgd_s" => Ok(AttackSpec::pgd_s(epsilon)),
        "pgd_t" => Ok(AttackSpec::pgd_t(epsilon)),
        other => Err(Error::config(
            "attacks",
            format!("unknown attack `{other}` (expected one of fgsm, pgd_s, pgd_t)"),
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub seed: u64,
    /// Random-start stream label, [`rng::ATTACK_EVAL`] or [`rng::ATTACK_SELECT`].
    pub label: &'static str,
    /// Separates the streams of different evaluations under one seed and label.
    pub context: u64,
}

/// Robust accuracy in both counting modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustAccuracy {
    /// Correct on the adversarial iterate.
    pub robust: f64,
    /// Correct on both the clean input and the adversarial iterate.
    pub strict: f64,
}

fn predictions(model: &Model<f32>, images: &Tensor<f32>) -> Result<Vec<usize>> {
    let logits = model.logits(images)?;
    Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
}

fn percent(correct: usize, total: usize) -> f64 {
    100.0 * correct as f64 / total as f64
}

/// Percentage of argmax-correct predictions.
pub fn evaluate_clean(model: &Model<f32>, dataset: &Dataset, batch_size: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut correct = 0;
    for batch in dataset.batches(batch_size) {
        let pred = predictions(model, &batch.images)?;
        correct += pred
            .iter()
            .zip(&batch.labels)
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(percent(correct, dataset.len()))
}

/// Percentage correct after attacking each batch with `spec`.
pub fn evaluate_under_attack(
    model: &Model<f32>,
    dataset: &Dataset,
    spec: &AttackSpec,
    opts: &EvalOptions,
) -> Result<RobustAccuracy> {
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (mut robust, mut strict) = (0, 0);
    for (b, batch) in dataset.batches(opts.batch_size).enumerate() {
        let mut rng = rng::stream(opts.seed, opts.label, &[opts.context, b as u64]);
        let adv = pgd(
            model,
            &batch.images,
            Target::Labels(&batch.labels),
            spec,
            &mut rng,
        )?;
        let clean = predictions(model, &batch.images)?;
        let attacked = predictions(model, &adv)?;
        for ((c, a), y) in clean.iter().zip(&attacked).zip(&batch.labels) {
            if a == y {
                robust += 1;
                if c == y {
                    strict += 1;
                }
            }
        }
    }
    Ok(RobustAccuracy {
        robust: percent(robust, dataset.len()),
        strict: percent(strict, dataset.len()),
    })
}

/// One attack's settings and outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub spec: AttackSpec,
    pub robust_accuracy: f64,
    pub strict_robust_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub schema_version: u32,
    pub model_id: String,
    pub dataset_id: String,
    pub seed: u64,
    pub clean_accuracy: f64,
    pub attacks: BTreeMap<String, AttackRecord>,
    /// Left empty by default so reports from identical runs compare byte for byte.
    pub timestamp: Option<String>,
}

impl RobustnessReport {
    /// Checks value ranges and that every name in `expected_attacks` has an entry.
    pub fn validate(&self, expected_attacks: &[String]) -> Result<()> {
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "schema_version {} is not {REPORT_SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        let in_range = |v: f64| (0.0..=100.0).contains(&v);
        if !in_range(self.clean_accuracy) {
            return Err(Error::Schema(format!(
                "clean_accuracy {} outside [0, 100]",
                self.clean_accuracy
            )));
        }
        if self.attacks.is_empty() {
            return Err(Error::Schema("report has no attack entries".into()));
        }
        for (name, rec) in &self.attacks {
            if !in_range(rec.robust_accuracy) || !in_range(rec.strict_robust_accuracy) {
                return Err(Error::Schema(format!(
                    "accuracy for `{name}` outside [0, 100]"
                )));
            }
        }
        for name in expected_attacks {
            if !self.attacks.contains_key(name) {
                return Err(Error::Schema(format!("missing entry for attack `{name}`")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Appends one `model,dataset,attack,clean,robust,strict` row per attack, writing
    /// the header first when the file is new.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let fresh = !path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            if fresh {
                writeln!(out, "model,dataset,attack,clean,robust,strict")?;
            }
            for (name, rec) in &self.attacks {
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    self.model_id,
                    self.dataset_id,
                    name,
                    self.clean_accuracy,
                    rec.robust_accuracy,
                    rec.strict_robust_accuracy
                )?;
            }
            out.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }
}

/// Clean accuracy plus every named attack, in the given order. The `i`-th attack draws
/// its random starts from evaluation context `i`.
pub fn evaluate_report(
    model: &Model<f32>,
    dataset: &Dataset,
    attacks: &[(String, AttackSpec)],
    batch_size: usize,
    seed: u64,
    model_id: &str,
    dataset_id: &str,
) -> Result<RobustnessReport> {
    let clean = evaluate_clean(model, dataset, batch_size)?;
    let mut records = BTreeMap::new();
    for (i, (name, spec)) in attacks.iter().enumerate() {
        let opts = EvalOptions {
            batch_size,
            seed,
            label: rng::ATTACK_EVAL,
            context: i as u64,
        };
        let acc = evaluate_under_attack(model, dataset, spec, &opts)?;
        records.insert(
            name.clone(),
            AttackRecord {
                spec: *spec,
                robust_accuracy: acc.robust,
                strict_robust_accuracy: acc.strict,
            },
        );
    }
    let report = RobustnessReport {
        schema_version: REPORT_SCHEMA_VERSION,
        model_id: model_id.to_string(),
        dataset_id: dataset_id.to_string(),
        seed,
        clean_accuracy: clean,
        attacks: records,
        timestamp: None,
    };
    let names: Vec<String> = attacks.iter().map(|(n, _)| n.clone()).collect();
    report.validate(&names)?;
    Ok(report)
}
