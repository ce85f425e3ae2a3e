//! L-infinity adversarial example generation: FGSM and projected gradient ascent.
//!
//! Every iterate is projected onto the intersection of the epsilon ball around the clean
//! input and the pixel range `[0, 1]`. Bounds are rounded inward so the constraint holds
//! exactly in `f64` even for `f32` images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{softmax_rows, Mode, Model};
use crate::tensor::{Scalar, Tensor};

/// Loss the attacker ascends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Cross-entropy against the true labels.
    CrossEntropy,
    /// `KL(student(x') || teacher(x))`, using the teacher's clean predictions as target.
    KlVsTeacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub objective: Objective,
    pub random_start: bool,
}

impl AttackSpec {
    /// Budget and step size multiplied by `factor` in [0, 1]. `None` at zero: the attack
    /// would return its input unchanged.
    pub fn scaled(&self, factor: f64) -> Option<AttackSpec> {
        (factor > 0.0).then_some(AttackSpec {
            epsilon: self.epsilon * factor,
            step_size: self.step_size * factor,
            ..*self
        })
    }

    /// Single full-budget signed-gradient step.
    pub fn fgsm(epsilon: f64) -> Self {
        AttackSpec {
            epsilon,
            steps: 1,
            // a zero budget pins every pixel anyway; keep the step valid
            step_size: if epsilon > 0.0 { epsilon } else { 1.0 / 255.0 },
            objective: Objective::CrossEntropy,
            random_start: false,
        }
    }

    /// 20 steps of 2/255, cross-entropy, random start.
    pub fn pgd_s(epsilon: f64) -> Self {
        AttackSpec {
            epsilon,
            steps: 20,
            step_size: 2.0 / 255.0,
            objective: Objective::CrossEntropy,
            random_start: true,
        }
    }

    /// 20 steps of 0.003, cross-entropy, random start.
    pub fn pgd_t(epsilon: f64) -> Self {
        AttackSpec {
            epsilon,
            steps: 20,
            step_size: 0.003,
            objective: Objective::CrossEntropy,
            random_start: true,
        }
    }

    /// Training-time adversary: 10 steps of 2/255 on the teacher-KL objective, random start.
    pub fn training(epsilon: f64) -> Self {
        AttackSpec {
            epsilon,
            steps: 10,
            step_size: 2.0 / 255.0,
            objective: Objective::KlVsTeacher,
            random_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::config(
                "epsilon",
                format!("{} is outside the allowed range [0, 1]", self.epsilon),
            ));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config(
                "step_size",
                format!("{} must be a positive finite number", self.step_size),
            ));
        }
        Ok(())
    }
}

/// What the attack objective compares the model's output against.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Labels(&'a [usize]),
    /// Row-major `[N, k]` teacher probabilities on the clean batch.
    TeacherProbs(&'a [f64]),
}

const LOG_FLOOR: f64 = 1e-12;

/// Gradient of the summed per-example objective with respect to the logits.
pub fn objective_logit_grad<T: Scalar>(
    logits: &Tensor<T>,
    target: Target<'_>,
    objective: Objective,
) -> Result<Tensor<T>> {
    let (n, k) = (logits.rows(), logits.row_len());
    let probs = softmax_rows(logits)?;
    let mut grad = Vec::with_capacity(n * k);
    match (objective, target) {
        (Objective::CrossEntropy, Target::Labels(labels)) => {
            check_len(labels.len(), n)?;
            for (row, &y) in probs.chunks_exact(k).zip(labels) {
                if y >= k {
                    return Err(Error::InvalidInput(format!("label {y} outside [0, {k})")));
                }
                grad.extend(
                    row.iter()
                        .enumerate()
                        .map(|(j, &p)| T::lit(if j == y { p - 1.0 } else { p })),
                );
            }
        }
        (Objective::KlVsTeacher, Target::TeacherProbs(teacher)) => {
            check_len(teacher.len(), n * k)?;
            for (p, t) in probs.chunks_exact(k).zip(teacher.chunks_exact(k)) {
                let log_ratio: Vec<f64> = p
                    .iter()
                    .zip(t)
                    .map(|(&pj, &tj)| pj.max(LOG_FLOOR).ln() - tj.max(LOG_FLOOR).ln())
                    .collect();
                let kl: f64 = p.iter().zip(&log_ratio).map(|(pj, l)| pj * l).sum();
                grad.extend(
                    p.iter()
                        .zip(&log_ratio)
                        .map(|(&pj, &l)| T::lit(pj * (l - kl))),
                );
            }
        }
        (objective, _) => {
            return Err(Error::InvalidInput(format!(
                "objective {objective:?} does not match the supplied target"
            )))
        }
    }
    Tensor::from_vec(logits.shape(), grad)
}

fn check_len(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::ShapeMismatch {
            expected: vec![want],
            actual: vec![got],
        });
    }
    Ok(())
}

fn input_grad<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    target: Target<'_>,
    objective: Objective,
) -> Result<Tensor<T>> {
    let pass = model.forward(x, Mode::Eval)?;
    let g = objective_logit_grad(&pass.logits, target, objective)?;
    let dx = model.input_gradient(&pass, &g)?;
    if !dx.all_finite() {
        return Err(Error::Numeric("non-finite input gradient".into()));
    }
    Ok(dx)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-pixel feasible interval `[max(x - eps, 0), min(x + eps, 1)]`, rounded inward.
fn bounds<T: Scalar>(x: T, epsilon: f64) -> (T, T) {
    let v = x.f64();
    (
        T::from_f64_ceil((v - epsilon).max(0.0)),
        T::from_f64_floor((v + epsilon).min(1.0)),
    )
}

fn project<T: Scalar>(candidate: f64, lo: T, hi: T) -> T {
    T::lit(candidate).max(lo).min(hi)
}

/// `clip(x + eps * sign(grad_x CE(model(x), labels)), [0, 1])`.
pub fn fgsm<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    epsilon: f64,
) -> Result<Tensor<T>> {
    AttackSpec::fgsm(epsilon).validate()?;
    let g = input_grad(model, x, Target::Labels(labels), Objective::CrossEntropy)?;
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&xi, &gi)| {
            let (lo, hi) = bounds(xi, epsilon);
            project(xi.f64() + epsilon * sign(gi.f64()), lo, hi)
        })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Projected signed-gradient ascent on `spec.objective` for `spec.steps` iterations.
pub fn pgd<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    x: &Tensor<T>,
    target: Target<'_>,
    spec: &AttackSpec,
    rng: &mut R,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let (lo, hi): (Vec<T>, Vec<T>) = x.data().iter().map(|&v| bounds(v, spec.epsilon)).unzip();
    let mut adv = x.clone();
    if spec.random_start && spec.epsilon > 0.0 {
        for ((a, &l), &h) in adv.data_mut().iter_mut().zip(&lo).zip(&hi) {
            let offset = rng.random_range(-spec.epsilon..=spec.epsilon);
            *a = project(a.f64() + offset, l, h);
        }
    }
    for _ in 0..spec.steps {
        let g = input_grad(model, &adv, target, spec.objective)?;
        for (((a, &gi), &l), &h) in adv.data_mut().iter_mut().zip(g.data()).zip(&lo).zip(&hi) {
            *a = project(a.f64() + spec.step_size * sign(gi.f64()), l, h);
        }
    }
    Ok(adv)
}

/// Adversarial examples for distillation: PGD against the divergence between the
/// student on `x'` and the frozen teacher on the clean `x`.
pub fn training_adversary<T: Scalar, R: Rng + ?Sized>(
    student: &Model<T>,
    teacher: &Model<T>,
    x: &Tensor<T>,
    spec: &AttackSpec,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let teacher_probs = softmax_rows(&teacher.logits(x)?)?;
    let spec = AttackSpec {
        objective: Objective::KlVsTeacher,
        ..*spec
    };
    pgd(student, x, Target::TeacherProbs(&teacher_probs), &spec, rng)
}

/// Largest absolute per-pixel difference.
pub fn linf_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.f64() - y.f64()).abs())
        .fold(0.0, f64::max)
}
