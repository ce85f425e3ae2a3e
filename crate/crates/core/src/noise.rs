//! Adaptive compensation: per-class teacher accuracy tallies and the noise matrices built
//! from them.
//!
//! For per-class accuracies `a`, the matrix has `a_j` on the diagonal of column `j` and
//! spreads the remaining `1 - a_j` evenly over the other `k - 1` rows, so every column is a
//! probability distribution and the matrix maps the simplex into itself.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Natural,
    Adversarial,
}

/// How the diagonal accuracies are derived from a tally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccuracyMode {
    /// One accuracy per class.
    #[default]
    PerClass,
    /// The set-level accuracy, broadcast to every class.
    Scalar,
}

/// Running count of teacher hits per ground-truth class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccuracyTally {
    correct: Vec<u64>,
    total: Vec<u64>,
    scenario: Scenario,
}

impl AccuracyTally {
    pub fn new(num_classes: usize, scenario: Scenario) -> Self {
        AccuracyTally {
            correct: vec![0; num_classes],
            total: vec![0; num_classes],
            scenario,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.total.len()
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario
    }

    pub fn correct(&self) -> &[u64] {
        &self.correct
    }

    pub fn total(&self) -> &[u64] {
        &self.total
    }

    pub fn reset(&mut self) {
        self.correct.iter_mut().for_each(|c| *c = 0);
        self.total.iter_mut().for_each(|t| *t = 0);
    }

    /// Counts one batch. `teacher_probs` is row-major `[labels.len(), k]`; a prediction is
    /// correct when its argmax (lowest index on ties) equals the label.
    pub fn update(&mut self, teacher_probs: &[f64], labels: &[usize]) -> Result<()> {
        let k = self.num_classes();
        if teacher_probs.len() != labels.len() * k {
            return Err(Error::ShapeMismatch {
                expected: vec![labels.len(), k],
                actual: vec![teacher_probs.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidInput(format!("label {bad} outside [0, {k})")));
        }
        for (row, &label) in teacher_probs.chunks_exact(k).zip(labels) {
            self.total[label] += 1;
            if argmax(row) == label {
                self.correct[label] += 1;
            }
        }
        Ok(())
    }

    /// Accuracy of class `i`, or `None` when the class has not been seen.
    pub fn class_accuracy(&self, i: usize) -> Option<f64> {
        (self.total[i] > 0).then(|| self.correct[i] as f64 / self.total[i] as f64)
    }

    /// Fraction correct over every counted example.
    pub fn overall_accuracy(&self) -> Option<f64> {
        let total: u64 = self.total.iter().sum();
        (total > 0).then(|| self.correct.iter().sum::<u64>() as f64 / total as f64)
    }

    /// Accuracy vector for building a noise matrix. Classes without observations take
    /// their value from `fallback` (the previous epoch's estimate).
    pub fn accuracies(&self, mode: AccuracyMode, fallback: &[f64]) -> Vec<f64> {
        match mode {
            AccuracyMode::PerClass => (0..self.num_classes())
                .map(|i| self.class_accuracy(i).unwrap_or(fallback[i]))
                .collect(),
            AccuracyMode::Scalar => match self.overall_accuracy() {
                Some(a) => vec![a; self.num_classes()],
                None => fallback.to_vec(),
            },
        }
    }
}

/// A `k x k` column-stochastic matrix, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseMatrix {
    k: usize,
    entries: Vec<f64>,
}

impl NoiseMatrix {
    pub fn identity(k: usize) -> Self {
        let mut entries = vec![0.0; k * k];
        for i in 0..k {
            entries[i * k + i] = 1.0;
        }
        NoiseMatrix { k, entries }
    }

    /// Diagonal `a_j`, off-diagonal `(1 - a_j) / (k - 1)` in column `j`.
    pub fn from_accuracies(accuracies: &[f64]) -> Result<Self> {
        let k = accuracies.len();
        if k < 2 {
            return Err(Error::DegenerateDimension(format!(
                "noise matrix needs at least 2 classes, got {k}"
            )));
        }
        if let Some(bad) = accuracies.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::InvalidInput(format!(
                "accuracy {bad} outside [0, 1]"
            )));
        }
        let off = |a: f64| (1.0 - a) / (k - 1) as f64;
        let mut entries = vec![0.0; k * k];
        for i in 0..k {
            for (j, &a) in accuracies.iter().enumerate() {
                entries[i * k + j] = if i == j { a } else { off(a) };
            }
        }
        Ok(NoiseMatrix { k, entries })
    }

    /// Reinstates a matrix from stored row-major entries.
    pub fn from_entries(k: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != k * k {
            return Err(Error::ShapeMismatch {
                expected: vec![k, k],
                actual: vec![entries.len()],
            });
        }
        Ok(NoiseMatrix { k, entries })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.k + col]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.k).map(|i| self.get(i, i)).collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.k)
            .map(|j| (0..self.k).map(|i| self.get(i, j)).sum())
            .collect()
    }

    /// `M p`. Not clamped: logit-space similarity feeds arbitrary real vectors through here.
    pub fn apply(&self, p: &[f64]) -> Result<Vec<f64>> {
        if p.len() != self.k {
            return Err(Error::ShapeMismatch {
                expected: vec![self.k],
                actual: vec![p.len()],
            });
        }
        Ok(self
            .entries
            .chunks_exact(self.k)
            .map(|row| row.iter().zip(p).map(|(m, x)| m * x).sum::<f64>())
            .collect())
    }

    /// `M^T g`, the pullback of a gradient through [`NoiseMatrix::apply`].
    pub fn apply_transpose(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        for (row, &gi) in self.entries.chunks_exact(self.k).zip(g) {
            for (o, &m) in out.iter_mut().zip(row) {
                *o += m * gi;
            }
        }
        out
    }

    /// Applies the matrix to every row of a row-major `[n, k]` block.
    pub fn apply_rows(&self, rows: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(rows.len());
        for r in rows.chunks_exact(self.k) {
            out.extend(self.apply(r)?);
        }
        Ok(out)
    }

    /// Induced infinity norm of `M - I` (largest absolute row sum).
    pub fn distance_from_identity(&self) -> f64 {
        self.entries
            .chunks_exact(self.k)
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .map(|(j, &m)| (m - if i == j { 1.0 } else { 0.0 }).abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn all_correct_class_zero() {
        let mut t = AccuracyTally::new(3, Scenario::Natural);
        let probs = [0.9, 0.05, 0.05].repeat(3);
        t.update(&probs, &[0, 0, 0]).unwrap();
        assert_eq!(t.correct()[0], 3);
        assert_eq!(t.total()[0], 3);
        assert_eq!(t.class_accuracy(0), Some(1.0));
    }

    #[test]
    fn misclassified_class_one() {
        let mut t = AccuracyTally::new(2, Scenario::Adversarial);
        t.update(&[0.6, 0.4], &[1]).unwrap();
        assert_eq!(t.correct()[1], 0);
        assert_eq!(t.total()[1], 1);
        assert_eq!(t.class_accuracy(1), Some(0.0));
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let mut t = AccuracyTally::new(2, Scenario::Natural);
        t.update(&[0.5, 0.5, 0.5, 0.5], &[0, 1]).unwrap();
        assert_eq!(t.correct(), &[1, 0]);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut t = AccuracyTally::new(2, Scenario::Natural);
        assert!(matches!(
            t.update(&[0.5, 0.5], &[2]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn unseen_classes_use_fallback() {
        let mut t = AccuracyTally::new(3, Scenario::Natural);
        t.update(&[0.1, 0.8, 0.1], &[0]).unwrap();
        assert_eq!(
            t.accuracies(AccuracyMode::PerClass, &[1.0, 0.7, 0.9]),
            vec![0.0, 0.7, 0.9]
        );
        assert_eq!(
            t.accuracies(AccuracyMode::Scalar, &[1.0, 0.7, 0.9]),
            vec![0.0; 3]
        );
        t.reset();
        assert_eq!(
            t.accuracies(AccuracyMode::Scalar, &[1.0, 0.7, 0.9]),
            vec![1.0, 0.7, 0.9]
        );
    }

    #[test]
    fn perfect_teacher_gives_identity() {
        assert_eq!(
            NoiseMatrix::from_accuracies(&[1.0; 3]).unwrap(),
            NoiseMatrix::identity(3)
        );
    }

    #[test]
    fn two_class_hand_example() {
        let m = NoiseMatrix::from_accuracies(&[0.8, 0.6]).unwrap();
        let want = [0.8, 0.4, 0.2, 0.6];
        for (a, b) in m.entries().iter().zip(want) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
        let out = m.apply(&[1.0, 0.0]).unwrap();
        assert_relative_eq!(out[0], 0.8, epsilon = 1e-15);
        assert_relative_eq!(out[1], 0.2, epsilon = 1e-15);
    }

    #[test]
    fn uniform_half_accuracy() {
        let m = NoiseMatrix::from_accuracies(&[0.5; 3]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.get(i, j), if i == j { 0.5 } else { 0.25 });
            }
        }
    }

    #[test]
    fn degenerate_and_out_of_range_inputs() {
        assert!(matches!(
            NoiseMatrix::from_accuracies(&[1.0]),
            Err(Error::DegenerateDimension(_))
        ));
        assert!(matches!(
            NoiseMatrix::from_accuracies(&[1.2, 0.5]),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            NoiseMatrix::identity(3).apply(&[0.5, 0.5]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn distance_from_identity() {
        assert_eq!(NoiseMatrix::identity(4).distance_from_identity(), 0.0);
        let m = NoiseMatrix::from_accuracies(&[0.8, 0.6]).unwrap();
        assert_relative_eq!(m.distance_from_identity(), 0.6, epsilon = 1e-12);
    }

    fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, k).prop_map(|v| {
            let s: f64 = v.iter().sum::<f64>() + 1e-12;
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn columns_are_distributions(a in (2usize..10).prop_flat_map(|k| prop::collection::vec(0.0f64..=1.0, k))) {
            let m = NoiseMatrix::from_accuracies(&a).unwrap();
            for s in m.column_sums() {
                prop_assert!((s - 1.0).abs() <= 1e-9);
            }
            prop_assert!(m.entries().iter().all(|&e| (0.0..=1.0).contains(&e)));
        }

        #[test]
        fn apply_preserves_simplex(
            (a, p) in (2usize..8).prop_flat_map(|k| (prop::collection::vec(0.0f64..=1.0, k), simplex(k)))
        ) {
            let m = NoiseMatrix::from_accuracies(&a).unwrap();
            let q = m.apply(&p).unwrap();
            let total: f64 = q.iter().sum();
            let p_total: f64 = p.iter().sum();
            prop_assert!((total - p_total).abs() <= 1e-6);
            prop_assert!(q.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn identity_application_is_exact(p in (2usize..8).prop_flat_map(simplex)) {
            let m = NoiseMatrix::from_accuracies(&vec![1.0; p.len()]).unwrap();
            prop_assert_eq!(m.apply(&p).unwrap(), p);
        }

        #[test]
        fn tally_matches_naive_recount(
            (k, rows) in (2usize..6).prop_flat_map(|k| (Just(k), prop::collection::vec((simplex(k), 0..k), 1..30)))
        ) {
            let mut t = AccuracyTally::new(k, Scenario::Natural);
            let probs: Vec<f64> = rows.iter().flat_map(|(p, _)| p.clone()).collect();
            let labels: Vec<usize> = rows.iter().map(|(_, l)| *l).collect();
            t.update(&probs, &labels).unwrap();
            for class in 0..k {
                let mut correct = 0;
                let mut total = 0;
                for (p, l) in &rows {
                    if *l != class { continue; }
                    total += 1;
                    let mut best = 0;
                    for j in 0..k { if p[j] > p[best] { best = j; } }
                    if best == class { correct += 1; }
                }
                prop_assert_eq!(t.correct()[class], correct);
                prop_assert_eq!(t.total()[class], total);
            }
        }
    }
}
