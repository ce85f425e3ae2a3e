//! Contrastive relationship distillation losses and the pointwise denoised baseline.
//!
//! For a batch of `N` examples the student pool holds `2N` score vectors, natural rows
//! first and adversarial rows after. For scenario `s` with noise matrix `M`, temperature
//! `tau` and teacher anchors `t_i`:
//!
//! ```text
//! s_ri   = cos(M p_r, t_i)
//! ratio_i = exp(s_{pos(i), i} / tau) / sum_{r != pos(i)} exp(s_ri / tau)
//! L_s    = -(1/N) sum_i log ratio_i
//! ```
//!
//! where `pos(i)` is `i` for the natural scenario and `N + i` for the adversarial one.
//! The positive pair is left out of the denominator unless `include_positive` is set.
//! Cosine similarity divides by `max(|u| |v|, cosine_eps)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::softmax;
use crate::noise::{NoiseMatrix, Scenario};

/// Which vectors the cosine similarities compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilaritySpace {
    /// Softmax probabilities; the noise matrices act on the simplex.
    #[default]
    Probabilities,
    /// Raw logits, with the noise matrices applied to them directly.
    Logits,
}

/// Distance used by the pointwise distillation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    /// `KL(teacher || student)` at temperature 1.
    #[default]
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub cosine_eps: f64,
    pub include_positive: bool,
    pub space: SimilaritySpace,
    pub distance: Distance,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.2,
            tau1: 0.5,
            tau2: 0.5,
            cosine_eps: 1e-8,
            include_positive: false,
            space: SimilaritySpace::Probabilities,
            distance: Distance::Kl,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(
                "lambda",
                format!("{} is outside the allowed range [0, 1]", self.lambda),
            ));
        }
        for (field, tau) in [("tau1", self.tau1), ("tau2", self.tau2)] {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::config(
                    field,
                    format!("{tau} must be a positive finite number"),
                ));
            }
        }
        if !(self.cosine_eps >= 0.0 && self.cosine_eps.is_finite()) {
            return Err(Error::config(
                "cosine_eps",
                "must be a non-negative finite number",
            ));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            nat: self.lambda,
            adv: 1.0 - self.lambda,
        }
    }
}

/// Coefficients of the natural and adversarial terms in the total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub nat: f64,
    pub adv: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub nat: f64,
    pub adv: f64,
    pub total: f64,
}

/// Teacher and (un-denoised) student score vectors of one batch, each row-major `[N, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPredictions {
    n: usize,
    k: usize,
    pub teacher_nat: Vec<f64>,
    pub teacher_adv: Vec<f64>,
    pub student_nat: Vec<f64>,
    pub student_adv: Vec<f64>,
}

impl BatchPredictions {
    pub fn new(
        k: usize,
        teacher_nat: Vec<f64>,
        teacher_adv: Vec<f64>,
        student_nat: Vec<f64>,
        student_adv: Vec<f64>,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::DegenerateDimension("k must be positive".into()));
        }
        let n = teacher_nat.len() / k;
        for block in [&teacher_nat, &teacher_adv, &student_nat, &student_adv] {
            if block.len() != n * k || block.len() % k != 0 {
                return Err(Error::ShapeMismatch {
                    expected: vec![n, k],
                    actual: vec![block.len()],
                });
            }
        }
        Ok(BatchPredictions {
            n,
            k,
            teacher_nat,
            teacher_adv,
            student_nat,
            student_adv,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    fn anchors(&self, scenario: Scenario) -> &[f64] {
        match scenario {
            Scenario::Natural => &self.teacher_nat,
            Scenario::Adversarial => &self.teacher_adv,
        }
    }

    /// The `2N`-row student pool, natural rows first.
    pub fn pool(&self) -> Vec<f64> {
        let mut pool = Vec::with_capacity(2 * self.n * self.k);
        pool.extend_from_slice(&self.student_nat);
        pool.extend_from_slice(&self.student_adv);
        pool
    }

    fn positive_index(&self, scenario: Scenario, i: usize) -> usize {
        match scenario {
            Scenario::Natural => i,
            Scenario::Adversarial => self.n + i,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `u.v / max(|u| |v|, eps)`.
pub fn cosine_similarity(u: &[f64], v: &[f64], eps: f64) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![u.len()],
            actual: vec![v.len()],
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero vector".into()));
    }
    Ok(dot(u, v) / (nu * nv).max(eps))
}

/// Ratio for anchor `i` in `scenario`, evaluated term by term.
pub fn contrastive_ratio(
    i: usize,
    scenario: Scenario,
    preds: &BatchPredictions,
    m: &NoiseMatrix,
    tau: f64,
    config: &LossConfig,
) -> Result<f64> {
    let (n, k) = (preds.n, preds.k);
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if i >= n {
        return Err(Error::InvalidInput(format!(
            "anchor {i} outside batch of {n}"
        )));
    }
    let anchor = &preds.anchors(scenario)[i * k..(i + 1) * k];
    let pool = m.apply_rows(&preds.pool())?;
    let pos = preds.positive_index(scenario, i);
    let term = |r: usize| -> Result<f64> {
        Ok((cosine_similarity(&pool[r * k..(r + 1) * k], anchor, config.cosine_eps)? / tau).exp())
    };
    let numerator = term(pos)?;
    let mut denominator = 0.0;
    for r in 0..2 * n {
        if r != pos || config.include_positive {
            denominator += term(r)?;
        }
    }
    Ok(numerator / denominator)
}

/// Loss and gradient of one scenario with respect to the denoised pool rows.
struct ScenarioTerm {
    loss: f64,
    grad_pool: Option<Vec<f64>>,
}

fn scenario_term(
    preds: &BatchPredictions,
    scenario: Scenario,
    m: &NoiseMatrix,
    tau: f64,
    config: &LossConfig,
    with_grad: bool,
) -> Result<ScenarioTerm> {
    let (n, k) = (preds.n, preds.k);
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if m.k() != k {
        return Err(Error::ShapeMismatch {
            expected: vec![k, k],
            actual: vec![m.k(), m.k()],
        });
    }
    let rows = 2 * n;
    let pool = m.apply_rows(&preds.pool())?;
    let anchors = preds.anchors(scenario);
    let pool_norms: Vec<f64> = pool.chunks_exact(k).map(norm).collect();
    let anchor_norms: Vec<f64> = anchors.chunks_exact(k).map(norm).collect();
    if pool_norms.iter().chain(&anchor_norms).any(|&v| v == 0.0) {
        return Err(Error::Numeric("cosine similarity of a zero vector".into()));
    }
    // sim[r * n + i] = cos(pool_r, anchor_i)
    let mut sim = vec![0.0; rows * n];
    for r in 0..rows {
        let pr = &pool[r * k..(r + 1) * k];
        for i in 0..n {
            let ai = &anchors[i * k..(i + 1) * k];
            sim[r * n + i] = dot(pr, ai) / (pool_norms[r] * anchor_norms[i]).max(config.cosine_eps);
        }
    }
    let mut loss = 0.0;
    // d loss / d sim
    let mut dsim = with_grad.then(|| vec![0.0; rows * n]);
    for i in 0..n {
        let pos = preds.positive_index(scenario, i);
        let included = |r: usize| r != pos || config.include_positive;
        let max = (0..rows)
            .filter(|&r| included(r))
            .map(|r| sim[r * n + i] / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..rows)
            .filter(|&r| included(r))
            .map(|r| (sim[r * n + i] / tau - max).exp())
            .sum();
        let lse = max + sum.ln();
        loss -= sim[pos * n + i] / tau - lse;
        if let Some(d) = dsim.as_mut() {
            let scale = 1.0 / (n as f64 * tau);
            d[pos * n + i] -= scale;
            for r in (0..rows).filter(|&r| included(r)) {
                d[r * n + i] += scale * (sim[r * n + i] / tau - lse).exp();
            }
        }
    }
    loss /= n as f64;
    let grad_pool = dsim.map(|d| {
        let mut g = vec![0.0; rows * k];
        for r in 0..rows {
            let pr = &pool[r * k..(r + 1) * k];
            let gr = &mut g[r * k..(r + 1) * k];
            for i in 0..n {
                let w = d[r * n + i];
                if w == 0.0 {
                    continue;
                }
                let ai = &anchors[i * k..(i + 1) * k];
                let norms = pool_norms[r] * anchor_norms[i];
                let denom = norms.max(config.cosine_eps);
                // below the floor the denominator is constant and only the dot product varies
                let radial = if norms > config.cosine_eps {
                    sim[r * n + i] / (pool_norms[r] * pool_norms[r])
                } else {
                    0.0
                };
                for j in 0..k {
                    gr[j] += w * (ai[j] / denom - radial * pr[j]);
                }
            }
        }
        // pull back through the noise matrix: d/dp = M^T d/dq
        let mut out = Vec::with_capacity(rows * k);
        for gr in g.chunks_exact(k) {
            out.extend(m.apply_transpose(gr));
        }
        out
    });
    Ok(ScenarioTerm { loss, grad_pool })
}

/// Natural relationship loss, with the whole pool denoised by `m1`.
pub fn loss_nat(preds: &BatchPredictions, m1: &NoiseMatrix, config: &LossConfig) -> Result<f64> {
    Ok(scenario_term(preds, Scenario::Natural, m1, config.tau1, config, false)?.loss)
}

/// Adversarial relationship loss, with the whole pool denoised by `m2`.
pub fn loss_adv(preds: &BatchPredictions, m2: &NoiseMatrix, config: &LossConfig) -> Result<f64> {
    Ok(scenario_term(preds, Scenario::Adversarial, m2, config.tau2, config, false)?.loss)
}

/// `lambda * L_nat + (1 - lambda) * L_adv`.
pub fn total_loss(
    preds: &BatchPredictions,
    m1: &NoiseMatrix,
    m2: &NoiseMatrix,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    let nat = loss_nat(preds, m1, config)?;
    let adv = loss_adv(preds, m2, config)?;
    let w = config.weights();
    Ok(LossBreakdown {
        nat,
        adv,
        total: w.nat * nat + w.adv * adv,
    })
}

/// Weighted loss and its gradient with respect to the student rows
/// (`[N, k]` natural, `[N, k]` adversarial), before denoising.
pub fn total_loss_with_grad(
    preds: &BatchPredictions,
    m1: &NoiseMatrix,
    m2: &NoiseMatrix,
    config: &LossConfig,
    weights: LossWeights,
) -> Result<(LossBreakdown, Vec<f64>, Vec<f64>)> {
    let nat = scenario_term(
        preds,
        Scenario::Natural,
        m1,
        config.tau1,
        config,
        weights.nat != 0.0,
    )?;
    let adv = scenario_term(
        preds,
        Scenario::Adversarial,
        m2,
        config.tau2,
        config,
        weights.adv != 0.0,
    )?;
    let half = preds.n * preds.k;
    let mut grad = vec![0.0; 2 * half];
    for (term, w) in [(&nat, weights.nat), (&adv, weights.adv)] {
        if let Some(g) = &term.grad_pool {
            for (o, &v) in grad.iter_mut().zip(g) {
                *o += w * v;
            }
        }
    }
    let adv_grad = grad.split_off(half);
    let breakdown = LossBreakdown {
        nat: nat.loss,
        adv: adv.loss,
        total: weights.nat * nat.loss + weights.adv * adv.loss,
    };
    Ok((breakdown, grad, adv_grad))
}

/// Student-side inputs to [`objective_from_logits`].
pub struct StudentLogits<'a> {
    pub nat: &'a [f64],
    pub adv: &'a [f64],
}

/// Full objective from student logits: softmax (in probability space), denoising,
/// contrastive terms. Returns the loss and its gradient with respect to the natural and
/// adversarial student logits. `teacher_nat`/`teacher_adv` must already live in the
/// configured similarity space.
#[allow(clippy::too_many_arguments)]
pub fn objective_from_logits(
    k: usize,
    student: StudentLogits<'_>,
    teacher_nat: &[f64],
    teacher_adv: &[f64],
    m1: &NoiseMatrix,
    m2: &NoiseMatrix,
    config: &LossConfig,
    weights: LossWeights,
) -> Result<(LossBreakdown, Vec<f64>, Vec<f64>)> {
    let to_space = |z: &[f64]| -> Result<Vec<f64>> {
        match config.space {
            SimilaritySpace::Logits => Ok(z.to_vec()),
            SimilaritySpace::Probabilities => {
                let mut out = Vec::with_capacity(z.len());
                for row in z.chunks_exact(k) {
                    out.extend(softmax(row)?);
                }
                Ok(out)
            }
        }
    };
    let s_nat = to_space(student.nat)?;
    let s_adv = to_space(student.adv)?;
    let preds = BatchPredictions::new(
        k,
        teacher_nat.to_vec(),
        teacher_adv.to_vec(),
        s_nat.clone(),
        s_adv.clone(),
    )?;
    let (loss, g_nat, g_adv) = total_loss_with_grad(&preds, m1, m2, config, weights)?;
    let pull = |p: &[f64], g: Vec<f64>| -> Vec<f64> {
        match config.space {
            SimilaritySpace::Logits => g,
            SimilaritySpace::Probabilities => softmax_backward(p, &g, k),
        }
    };
    Ok((loss, pull(&s_nat, g_nat), pull(&s_adv, g_adv)))
}

/// Pullback through row-wise softmax: `dz = p * (g - <p, g>)`.
pub fn softmax_backward(probs: &[f64], grad: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(probs.len());
    for (p, g) in probs.chunks_exact(k).zip(grad.chunks_exact(k)) {
        let inner = dot(p, g);
        out.extend(p.iter().zip(g).map(|(pi, gi)| pi * (gi - inner)));
    }
    out
}

const KL_FLOOR: f64 = 1e-12;

/// Mean over rows of `D(teacher_i, student_i)` for row-major `[N, k]` blocks.
pub fn kd_loss(teacher: &[f64], student: &[f64], k: usize, distance: Distance) -> Result<f64> {
    if teacher.len() != student.len() || k == 0 || !teacher.len().is_multiple_of(k) {
        return Err(Error::ShapeMismatch {
            expected: vec![teacher.len()],
            actual: vec![student.len()],
        });
    }
    let n = teacher.len() / k;
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let Distance::Kl = distance;
    let mut clamped = 0usize;
    let mut total = 0.0;
    for (t, s) in teacher.chunks_exact(k).zip(student.chunks_exact(k)) {
        for (&tj, &sj) in t.iter().zip(s) {
            if tj > 0.0 {
                if sj < KL_FLOOR {
                    clamped += 1;
                }
                total += tj * (tj.ln() - sj.max(KL_FLOOR).ln());
            }
        }
    }
    if clamped > 0 {
        log::warn!("kd loss clamped {clamped} student probabilities to {KL_FLOOR:e}");
    }
    Ok(total / n as f64)
}

/// Pointwise distillation against the denoised student: `D(teacher, M student)`.
pub fn denoised_kd_loss(
    teacher: &[f64],
    student: &[f64],
    m: &NoiseMatrix,
    distance: Distance,
) -> Result<f64> {
    kd_loss(teacher, &m.apply_rows(student)?, m.k(), distance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    #[test]
    fn cosine_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_relative_eq!(
            cosine_similarity(&p, &p, 1e-8).unwrap(),
            1.0,
            epsilon = 1e-9
        );
        assert_eq!(
            cosine_similarity(&[1.0, 0.0], &[0.0, 1.0], 1e-8).unwrap(),
            0.0
        );
        assert_relative_eq!(
            cosine_similarity(&[0.5, 0.5], &[1.0, 0.0], 1e-8).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-12
        );
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0], 1e-8),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn all_identical_collapses_to_unit_ratio() {
        let v = vec![0.3, 0.7];
        let preds = BatchPredictions::new(2, v.clone(), v.clone(), v.clone(), v).unwrap();
        let id = NoiseMatrix::identity(2);
        let r = contrastive_ratio(0, Scenario::Natural, &preds, &id, 0.5, &cfg()).unwrap();
        assert_relative_eq!(r, 1.0, epsilon = 1e-12);
        assert_relative_eq!(loss_nat(&preds, &id, &cfg()).unwrap(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(loss_adv(&preds, &id, &cfg()).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn aligned_anchor_orthogonal_negative() {
        // teacher anchor [1,0]; positive student [1,0]; the only negative (adv row) is [0,1]
        let preds = BatchPredictions::new(
            2,
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        )
        .unwrap();
        let id = NoiseMatrix::identity(2);
        let r = contrastive_ratio(0, Scenario::Natural, &preds, &id, 0.5, &cfg()).unwrap();
        assert_relative_eq!(r, (2.0f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(
            loss_nat(&preds, &id, &cfg()).unwrap(),
            -2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn empty_batch_is_rejected() {
        let preds = BatchPredictions::new(2, vec![], vec![], vec![], vec![]).unwrap();
        let id = NoiseMatrix::identity(2);
        assert!(matches!(
            loss_nat(&preds, &id, &cfg()),
            Err(Error::EmptyBatch)
        ));
        assert!(matches!(
            contrastive_ratio(0, Scenario::Natural, &preds, &id, 0.5, &cfg()),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn mismatched_blocks_are_rejected() {
        assert!(
            BatchPredictions::new(2, vec![0.5; 4], vec![0.5; 2], vec![0.5; 4], vec![0.5; 4])
                .is_err()
        );
    }

    #[test]
    fn total_loss_endpoints() {
        let preds = BatchPredictions::new(
            3,
            vec![0.7, 0.2, 0.1, 0.1, 0.1, 0.8],
            vec![0.5, 0.3, 0.2, 0.2, 0.2, 0.6],
            vec![0.6, 0.3, 0.1, 0.3, 0.3, 0.4],
            vec![0.4, 0.4, 0.2, 0.1, 0.5, 0.4],
        )
        .unwrap();
        let m1 = NoiseMatrix::from_accuracies(&[0.9, 0.8, 0.7]).unwrap();
        let m2 = NoiseMatrix::from_accuracies(&[0.6, 0.5, 0.4]).unwrap();
        let at = |lambda| {
            let c = LossConfig { lambda, ..cfg() };
            total_loss(&preds, &m1, &m2, &c).unwrap()
        };
        let zero = at(0.0);
        assert_eq!(zero.total, zero.adv);
        let one = at(1.0);
        assert_eq!(one.total, one.nat);
        let w = LossWeights { nat: 0.2, adv: 0.8 };
        assert_relative_eq!(w.nat * 1.0 + w.adv * 2.0, 1.8, epsilon = 1e-15);
    }

    #[test]
    fn symmetric_blocks_give_equal_terms() {
        let s = vec![0.6, 0.3, 0.1, 0.2, 0.5, 0.3];
        let t = vec![0.7, 0.2, 0.1, 0.1, 0.6, 0.3];
        let preds = BatchPredictions::new(3, t.clone(), t, s.clone(), s).unwrap();
        let m = NoiseMatrix::from_accuracies(&[0.9, 0.8, 0.7]).unwrap();
        let a = loss_nat(&preds, &m, &cfg()).unwrap();
        let b = loss_adv(&preds, &m, &cfg()).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn kd_examples() {
        let p = [0.2, 0.8];
        assert_eq!(kd_loss(&p, &p, 2, Distance::Kl).unwrap(), 0.0);
        assert_relative_eq!(
            kd_loss(&[1.0, 0.0], &[0.5, 0.5], 2, Distance::Kl).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        let s = [0.3, 0.7, 0.9, 0.1];
        let t = [0.5, 0.5, 0.6, 0.4];
        let id = NoiseMatrix::identity(2);
        assert_eq!(
            denoised_kd_loss(&t, &s, &id, Distance::Kl).unwrap(),
            kd_loss(&t, &s, 2, Distance::Kl).unwrap()
        );
    }

    #[test]
    fn kd_clamps_zero_student_mass() {
        let v = kd_loss(&[1.0, 0.0], &[0.0, 1.0], 2, Distance::Kl).unwrap();
        assert_relative_eq!(v, -(KL_FLOOR.ln()), epsilon = 1e-9);
    }

    #[test]
    fn config_validation_names_field() {
        let err = LossConfig {
            lambda: 1.5,
            ..cfg()
        }
        .validate()
        .unwrap_err()
        .to_string();
        assert!(err.contains("lambda") && err.contains("[0, 1]"), "{err}");
        assert!(LossConfig { tau2: 0.0, ..cfg() }.validate().is_err());
    }
}
