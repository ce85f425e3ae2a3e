use crdnd::attacks::{pgd, AttackSpec, Target};
use crdnd::data::{make_toy_dataset, Dataset, Split, ToyRecipe};
use crdnd::evaluation::{
    evaluate_clean, evaluate_report, evaluate_under_attack, standard_attack, EvalOptions,
    RobustnessReport,
};
use crdnd::model::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint};
use crdnd::model::{Architecture, Model, ModelSpec};
use crdnd::rng;
use crdnd::tensor::argmax;
use crdnd::training::{TrainConfig, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup() -> (Model<f32>, Dataset) {
    let spec = ModelSpec::new(Architecture::TinyCnn, 10, (3, 32, 32)).with_width(4);
    let model = Model::new(spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let data = make_toy_dataset(&ToyRecipe::default(), 30, 2, Split::Test).unwrap();
    (model, data)
}

fn opts(batch_size: usize) -> EvalOptions {
    EvalOptions {
        batch_size,
        seed: 9,
        label: rng::ATTACK_EVAL,
        context: 0,
    }
}

#[test]
fn zero_budget_robust_accuracy_equals_clean_accuracy() {
    let (model, data) = setup();
    let clean = evaluate_clean(&model, &data, 7).unwrap();
    for name in ["fgsm", "pgd_s", "pgd_t"] {
        let acc = evaluate_under_attack(
            &model,
            &data,
            &standard_attack(name, 0.0).unwrap(),
            &opts(7),
        )
        .unwrap();
        assert_eq!(acc.robust, clean, "{name}");
        assert_eq!(acc.strict, clean, "{name}");
    }
}

#[test]
fn clean_accuracy_does_not_depend_on_batch_size() {
    let (model, data) = setup();
    let reference = evaluate_clean(&model, &data, 30).unwrap();
    for bs in [1, 4, 13] {
        assert_eq!(evaluate_clean(&model, &data, bs).unwrap(), reference);
    }
}

#[test]
fn robust_accuracy_matches_per_example_count() {
    let (model, data) = setup();
    let spec = AttackSpec {
        random_start: false,
        steps: 3,
        ..AttackSpec::pgd_s(8.0 / 255.0)
    };
    let acc = evaluate_under_attack(&model, &data, &spec, &opts(8)).unwrap();
    let (mut robust, mut strict) = (0, 0);
    for i in 0..data.len() {
        let b = data.batch(&[i]);
        let y = b.labels[0];
        let adv = pgd(
            &model,
            &b.images,
            Target::Labels(&b.labels),
            &spec,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let hit = argmax(model.logits(&adv).unwrap().row(0)) == y;
        let clean_hit = argmax(model.logits(&b.images).unwrap().row(0)) == y;
        robust += hit as usize;
        strict += (hit && clean_hit) as usize;
    }
    assert_eq!(acc.robust, 100.0 * robust as f64 / data.len() as f64);
    assert_eq!(acc.strict, 100.0 * strict as f64 / data.len() as f64);
    assert!(acc.strict <= acc.robust);
}

#[test]
fn report_round_trips_and_flags_missing_attacks() {
    let (model, data) = setup();
    let attacks: Vec<(String, AttackSpec)> = ["fgsm", "pgd_t"]
        .iter()
        .map(|n| {
            (
                n.to_string(),
                AttackSpec {
                    steps: 2,
                    ..standard_attack(n, 8.0 / 255.0).unwrap()
                },
            )
        })
        .collect();
    let report = evaluate_report(&model, &data, &attacks, 10, 3, "student", "toy").unwrap();
    let again = evaluate_report(&model, &data, &attacks, 10, 3, "student", "toy").unwrap();
    assert_eq!(report.to_json(), again.to_json());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    report.write(&path).unwrap();
    let read = RobustnessReport::read(&path).unwrap();
    assert_eq!(read, report);
    assert!(read.validate(&["fgsm".into(), "pgd_t".into()]).is_ok());
    let err = read.validate(&["pgd_s".into()]).unwrap_err().to_string();
    assert!(err.contains("pgd_s"), "{err}");

    let csv = dir.path().join("results.csv");
    report.append_csv(&csv).unwrap();
    report.append_csv(&csv).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 2);
    assert!(RobustnessReport::from_json("{\"schema_version\": 1}").is_err());
}

#[test]
fn unknown_attack_name_is_a_config_error() {
    let err = standard_attack("cw", 0.03).unwrap_err().to_string();
    assert!(err.contains("cw"), "{err}");
}

#[test]
fn checkpoint_round_trip_and_spec_check() {
    let (model, data) = setup();
    let cfg = TrainConfig::default();
    let mut state = TrainState::new(model, &cfg);
    state.epoch = 4;
    state.step = 120;
    state.best = Some((41.5, 3));
    state.carried_nat[2] = 0.25;
    let ckpt = state.to_checkpoint();
    assert_eq!(Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap(), ckpt);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let loaded = load_checkpoint_for(&path, &ckpt.spec).unwrap();
    let restored = TrainState::from_checkpoint(loaded, &cfg).unwrap();
    assert_eq!(
        evaluate_clean(&restored.student, &data, 10).unwrap(),
        evaluate_clean(&state.student, &data, 10).unwrap()
    );
    assert_eq!(
        restored.student.params().digest(),
        state.student.params().digest()
    );
    assert_eq!(restored.carried_nat, state.carried_nat);

    let wrong_k = ModelSpec {
        num_classes: 100,
        ..ckpt.spec
    };
    let err = load_checkpoint_for(&path, &wrong_k)
        .unwrap_err()
        .to_string();
    assert!(err.contains("100"), "{err}");
    let wrong_width = ckpt.spec.with_width(8);
    assert!(load_checkpoint_for(&path, &wrong_width).is_err());

    let mut bytes = ckpt.to_bytes();
    bytes.truncate(bytes.len() / 2);
    assert!(Checkpoint::from_bytes(&bytes).is_err());
    bytes[0] ^= 0xff;
    assert!(Checkpoint::from_bytes(&bytes).is_err());
    assert!(load_checkpoint(&dir.path().join("absent.ckpt")).is_err());
}
