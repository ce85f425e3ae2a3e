use crdnd::attacks::{fgsm, linf_distance, pgd, training_adversary, AttackSpec, Objective, Target};
use crdnd::model::{Architecture, Model, ModelSpec};
use crdnd::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(seed: u64) -> Model<f32> {
    let spec = ModelSpec::new(Architecture::TinyCnn, 4, (3, 8, 8)).with_width(4);
    Model::new(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn images(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f32> {
    // a share of pixels sits exactly on the range boundary
    let data = (0..n * 3 * 64)
        .map(|_| match rng.random_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.0..1.0f32),
        })
        .collect();
    Tensor::from_vec(&[n, 3, 8, 8], data).unwrap()
}

fn within_budget(x: &Tensor<f32>, adv: &Tensor<f32>, eps: f64) -> Result<(), TestCaseError> {
    prop_assert!(
        linf_distance(x, adv) <= eps,
        "moved {} > {eps}",
        linf_distance(x, adv)
    );
    prop_assert!(adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_attack_stays_in_ball_and_range(
        seed in any::<u64>(),
        eps in 0.0f64..0.1,
        steps in 1usize..6,
        step_frac in 0.05f64..1.5,
        random_start in any::<bool>(),
        kl in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = tiny(seed ^ 1);
        let x = images(&mut rng, 3);
        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
        let spec = AttackSpec {
            epsilon: eps,
            steps,
            step_size: (eps * step_frac).max(1e-4),
            objective: Objective::CrossEntropy,
            random_start,
        };
        within_budget(&x, &fgsm(&model, &x, &labels, eps).unwrap(), eps)?;
        let adv = if kl {
            training_adversary(&model, &tiny(seed ^ 2), &x, &spec, &mut rng).unwrap()
        } else {
            pgd(&model, &x, Target::Labels(&labels), &spec, &mut rng).unwrap()
        };
        within_budget(&x, &adv, eps)?;
    }

    #[test]
    fn fgsm_is_single_unrandomized_pgd_step(seed in any::<u64>(), eps in 0.001f64..0.1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = tiny(seed);
        let x = images(&mut rng, 2);
        let labels = [rng.random_range(0..4), rng.random_range(0..4)];
        let a = fgsm(&model, &x, &labels, eps).unwrap();
        let b = pgd(&model, &x, Target::Labels(&labels), &AttackSpec::fgsm(eps), &mut rng).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn zero_budget_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = tiny(1);
    let x = images(&mut rng, 4);
    let labels = [0, 1, 2, 3];
    for spec in [
        AttackSpec::pgd_s(0.0),
        AttackSpec::pgd_t(0.0),
        AttackSpec::fgsm(0.0),
    ] {
        assert_eq!(
            pgd(&model, &x, Target::Labels(&labels), &spec, &mut rng).unwrap(),
            x
        );
    }
}

#[test]
fn batched_attack_equals_per_example_attack() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = tiny(2);
    let x = images(&mut rng, 5);
    let labels = [3, 0, 2, 1, 1];
    let spec = AttackSpec {
        random_start: false,
        ..AttackSpec::pgd_s(8.0 / 255.0)
    };
    let batched = pgd(&model, &x, Target::Labels(&labels), &spec, &mut rng).unwrap();
    for i in 0..5 {
        let xi = x.slice_rows(i, i + 1);
        let single = pgd(&model, &xi, Target::Labels(&labels[i..=i]), &spec, &mut rng).unwrap();
        assert_eq!(single.data(), batched.row(i), "example {i}");
    }
}

#[test]
fn attacks_do_not_touch_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let student = tiny(3);
    let teacher = tiny(4);
    let (ds, dt) = (student.params().digest(), teacher.params().digest());
    let x = images(&mut rng, 4);
    pgd(
        &student,
        &x,
        Target::Labels(&[0, 1, 2, 3]),
        &AttackSpec::pgd_s(0.03),
        &mut rng,
    )
    .unwrap();
    training_adversary(
        &student,
        &teacher,
        &x,
        &AttackSpec::training(0.03),
        &mut rng,
    )
    .unwrap();
    assert_eq!(student.params().digest(), ds);
    assert_eq!(teacher.params().digest(), dt);
}

#[test]
fn linear_model_pgd_lands_on_signed_corner() {
    // logits = W x with W rows (1, -1, 2) and (-1, 1, -2): for label 0 the cross-entropy
    // ascent direction per pixel is sign(w1 - w0) = (-, +, -).
    let spec = ModelSpec::new(Architecture::Linear, 2, (1, 1, 3));
    let mut m = Model::<f64>::new(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    m.params_mut()
        .tensor_mut(0)
        .data_mut()
        .copy_from_slice(&[1.0, -1.0, 2.0, -1.0, 1.0, -2.0]);
    m.params_mut().tensor_mut(1).data_mut().fill(0.0);
    let x = Tensor::from_vec(&[1, 1, 1, 3], vec![0.5, 0.5, 0.02]).unwrap();
    let eps = 0.1;
    let spec = AttackSpec {
        epsilon: eps,
        steps: 10,
        step_size: 0.03,
        objective: Objective::CrossEntropy,
        random_start: true,
    };
    let adv = pgd(
        &m,
        &x,
        Target::Labels(&[0]),
        &spec,
        &mut ChaCha8Rng::seed_from_u64(9),
    )
    .unwrap();
    assert_eq!(adv.data(), &[0.5 - eps, 0.5 + eps, 0.0]);
}
