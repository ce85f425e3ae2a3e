use crdnd::losses::{
    contrastive_ratio, denoised_kd_loss, kd_loss, loss_adv, loss_nat, total_loss, BatchPredictions,
    Distance, LossConfig,
};
use crdnd::noise::{NoiseMatrix, Scenario};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[allow(clippy::needless_range_loop)]
/// Textbook evaluation: denoise every pool row, then loop over anchors and pool members.
fn oracle(
    anchors: &[Vec<f64>],
    nat: &[Vec<f64>],
    adv: &[Vec<f64>],
    m: &[Vec<f64>],
    tau: f64,
    positive_in_adv_block: bool,
) -> f64 {
    let n = anchors.len();
    let denoise = |p: &Vec<f64>| -> Vec<f64> {
        (0..p.len())
            .map(|i| (0..p.len()).map(|j| m[i][j] * p[j]).sum())
            .collect()
    };
    let cos = |u: &[f64], v: &[f64]| -> f64 {
        let d: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        d / (nu * nv)
    };
    let pool: Vec<Vec<f64>> = nat.iter().chain(adv).map(denoise).collect();
    let mut sum = 0.0;
    for i in 0..n {
        let pos = if positive_in_adv_block { n + i } else { i };
        let numerator = (cos(&pool[pos], &anchors[i]) / tau).exp();
        let mut denominator = 0.0;
        for (r, q) in pool.iter().enumerate() {
            if r != pos {
                denominator += (cos(q, &anchors[i]) / tau).exp();
            }
        }
        sum += (numerator / denominator).ln();
    }
    -sum / n as f64
}

fn simplex_rows(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

fn flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

fn rows_of(m: &NoiseMatrix) -> Vec<Vec<f64>> {
    m.entries().chunks(m.k()).map(|r| r.to_vec()).collect()
}

#[test]
fn vectorized_losses_match_double_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let n = rng.random_range(1..=8);
        let k = rng.random_range(2..=5);
        let (tn, ta) = (simplex_rows(&mut rng, n, k), simplex_rows(&mut rng, n, k));
        let (sn, sa) = (simplex_rows(&mut rng, n, k), simplex_rows(&mut rng, n, k));
        let a1: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..=1.0)).collect();
        let a2: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..=1.0)).collect();
        let (m1, m2) = (
            NoiseMatrix::from_accuracies(&a1).unwrap(),
            NoiseMatrix::from_accuracies(&a2).unwrap(),
        );
        let cfg = LossConfig {
            tau1: rng.random_range(0.1..2.0),
            tau2: rng.random_range(0.1..2.0),
            ..LossConfig::default()
        };
        let preds = BatchPredictions::new(k, flat(&tn), flat(&ta), flat(&sn), flat(&sa)).unwrap();
        let nat = loss_nat(&preds, &m1, &cfg).unwrap();
        let adv = loss_adv(&preds, &m2, &cfg).unwrap();
        let nat_ref = oracle(&tn, &sn, &sa, &rows_of(&m1), cfg.tau1, false);
        let adv_ref = oracle(&ta, &sn, &sa, &rows_of(&m2), cfg.tau2, true);
        assert!((nat - nat_ref).abs() < 1e-6, "nat {nat} vs {nat_ref}");
        assert!((adv - adv_ref).abs() < 1e-6, "adv {adv} vs {adv_ref}");
    }
}

fn single(k: usize, t: &[f64], s_nat: &[f64], s_adv: &[f64]) -> BatchPredictions {
    BatchPredictions::new(k, t.to_vec(), t.to_vec(), s_nat.to_vec(), s_adv.to_vec()).unwrap()
}

#[test]
fn identical_vectors_give_unit_ratio_and_zero_loss() {
    let p = [0.3, 0.7];
    let preds = single(2, &p, &p, &p);
    let id = NoiseMatrix::identity(2);
    let cfg = LossConfig::default();
    let ratio = contrastive_ratio(0, Scenario::Natural, &preds, &id, 0.5, &cfg).unwrap();
    assert!((ratio - 1.0).abs() < 1e-12);
    assert!(loss_nat(&preds, &id, &cfg).unwrap().abs() < 1e-12);
    assert!(loss_adv(&preds, &id, &cfg).unwrap().abs() < 1e-12);
}

#[test]
fn aligned_positive_against_orthogonal_negative() {
    // positive matches the anchor, the single negative is orthogonal to it
    let preds = single(2, &[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]);
    let id = NoiseMatrix::identity(2);
    let cfg = LossConfig::default();
    let ratio = contrastive_ratio(0, Scenario::Natural, &preds, &id, 0.5, &cfg).unwrap();
    assert!((ratio - 2f64.exp()).abs() < 1e-9, "{ratio}");
    assert!((loss_nat(&preds, &id, &cfg).unwrap() + 2.0).abs() < 1e-9);
}

#[test]
fn lambda_endpoints_and_convex_combination() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, k) = (4, 3);
    let blocks: Vec<Vec<f64>> = (0..4)
        .map(|_| flat(&simplex_rows(&mut rng, n, k)))
        .collect();
    let preds = BatchPredictions::new(
        k,
        blocks[0].clone(),
        blocks[1].clone(),
        blocks[2].clone(),
        blocks[3].clone(),
    )
    .unwrap();
    let m1 = NoiseMatrix::from_accuracies(&[0.9, 0.7, 0.8]).unwrap();
    let m2 = NoiseMatrix::from_accuracies(&[0.6, 0.5, 0.9]).unwrap();
    let with = |lambda| {
        total_loss(
            &preds,
            &m1,
            &m2,
            &LossConfig {
                lambda,
                ..LossConfig::default()
            },
        )
        .unwrap()
    };
    let at0 = with(0.0);
    assert_eq!(at0.total, at0.adv);
    let at1 = with(1.0);
    assert_eq!(at1.total, at1.nat);
    let mid = with(0.2);
    assert!((mid.total - (0.2 * mid.nat + 0.8 * mid.adv)).abs() < 1e-15);
}

#[test]
fn mirrored_blocks_give_equal_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, k) = (5, 4);
    let t = flat(&simplex_rows(&mut rng, n, k));
    let s = flat(&simplex_rows(&mut rng, n, k));
    let preds = BatchPredictions::new(k, t.clone(), t, s.clone(), s).unwrap();
    let m = NoiseMatrix::from_accuracies(&[0.9, 0.8, 0.7, 0.95]).unwrap();
    let cfg = LossConfig::default();
    let nat = loss_nat(&preds, &m, &cfg).unwrap();
    let adv = loss_adv(&preds, &m, &cfg).unwrap();
    assert!((nat - adv).abs() < 1e-12);
}

#[test]
fn lambda_out_of_range_names_field() {
    let err = LossConfig {
        lambda: 1.5,
        ..LossConfig::default()
    }
    .validate()
    .unwrap_err();
    assert!(err.to_string().contains("lambda"), "{err}");
    assert!(LossConfig {
        tau2: 0.0,
        ..LossConfig::default()
    }
    .validate()
    .is_err());
}

#[test]
fn empty_batch_is_rejected() {
    let preds = BatchPredictions::new(2, vec![], vec![], vec![], vec![]).unwrap();
    let id = NoiseMatrix::identity(2);
    assert!(contrastive_ratio(
        0,
        Scenario::Natural,
        &preds,
        &id,
        0.5,
        &LossConfig::default()
    )
    .is_err());
}

#[test]
fn kd_examples() {
    assert_eq!(
        kd_loss(&[0.2, 0.8], &[0.2, 0.8], 2, Distance::Kl).unwrap(),
        0.0
    );
    let v = kd_loss(&[1.0, 0.0], &[0.5, 0.5], 2, Distance::Kl).unwrap();
    assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
}

fn batch_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>, u64)> {
    (1usize..=6, 2usize..=5).prop_flat_map(|(n, k)| {
        (
            Just(n),
            Just(k),
            prop::collection::vec(0.001f64..1.0, 4 * n * k),
            any::<u64>(),
        )
    })
}

fn normalized(raw: &[f64], k: usize) -> Vec<f64> {
    raw.chunks(k)
        .flat_map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(move |v| v / s)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn losses_are_finite_and_bounded((n, k, raw, seed) in batch_strategy(), tau in 0.05f64..2.0) {
        let p = normalized(&raw, k);
        let b = n * k;
        let preds = BatchPredictions::new(k, p[..b].to_vec(), p[b..2 * b].to_vec(), p[2 * b..3 * b].to_vec(), p[3 * b..].to_vec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let acc: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..=1.0)).collect();
        let m = NoiseMatrix::from_accuracies(&acc).unwrap();
        let cfg = LossConfig { tau1: tau, tau2: tau, ..LossConfig::default() };
        let bound = 2.0 / tau + ((2 * n - 1) as f64).ln();
        for v in [loss_nat(&preds, &m, &cfg).unwrap(), loss_adv(&preds, &m, &cfg).unwrap()] {
            prop_assert!(v.is_finite());
            prop_assert!(v.abs() <= bound + 1e-9, "{v} exceeds {bound}");
        }
    }

    #[test]
    fn permuting_the_batch_leaves_the_loss_unchanged((n, k, raw, seed) in batch_strategy()) {
        let p = normalized(&raw, k);
        let b = n * k;
        let blocks: Vec<&[f64]> = (0..4).map(|i| &p[i * b..(i + 1) * b]).collect();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let permute = |block: &[f64]| -> Vec<f64> { order.iter().flat_map(|&i| block[i * k..(i + 1) * k].to_vec()).collect() };
        let a = BatchPredictions::new(k, blocks[0].to_vec(), blocks[1].to_vec(), blocks[2].to_vec(), blocks[3].to_vec()).unwrap();
        let b2 = BatchPredictions::new(k, permute(blocks[0]), permute(blocks[1]), permute(blocks[2]), permute(blocks[3])).unwrap();
        let m1 = NoiseMatrix::from_accuracies(&vec![0.8; k]).unwrap();
        let m2 = NoiseMatrix::from_accuracies(&vec![0.6; k]).unwrap();
        let cfg = LossConfig::default();
        let x = total_loss(&a, &m1, &m2, &cfg).unwrap().total;
        let y = total_loss(&b2, &m1, &m2, &cfg).unwrap().total;
        prop_assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn identity_matrix_reduces_denoised_kd_to_plain_kd() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let k = rng.random_range(2..=6);
        let t = flat(&simplex_rows(&mut rng, n, k));
        let s = flat(&simplex_rows(&mut rng, n, k));
        let plain = kd_loss(&t, &s, k, Distance::Kl).unwrap();
        let denoised = denoised_kd_loss(&t, &s, &NoiseMatrix::identity(k), Distance::Kl).unwrap();
        assert_eq!(plain, denoised);
    }
}
