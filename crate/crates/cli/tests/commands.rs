//! End-to-end runs of the binary on a shrunken toy setup.

use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use crdnd::config::RunConfig;
use crdnd::evaluation::RobustnessReport;
use crdnd::training::read_log;

const SMALL: &[&str] = &[
    "--profile",
    "desk",
    "--subset",
    "200",
    "--test-subset",
    "60",
    "--teacher-epochs",
    "1",
    "--steps",
    "2",
];

fn crdnd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crdnd"))
        .args(args)
        .env_remove("CRDND_DATA_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

/// One shared one-epoch training run; later tests reuse its teacher and student.
fn trained() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let mut args = vec!["train", "--epochs", "1", "--out", out];
        args.extend_from_slice(SMALL);
        let res = crdnd(&args);
        assert!(res.status.success(), "{}", text(&res.stderr));
        dir
    })
    .path()
}

#[test]
fn train_smoke_writes_every_artifact() {
    let dir = trained();
    assert_eq!(read_log(&dir.join("train_log.csv")).unwrap().len(), 1);
    for f in [
        "teacher.ckpt",
        "teacher_log.csv",
        "last.ckpt",
        "best.ckpt",
        "report.json",
    ] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let report = RobustnessReport::read(&dir.join("report.json")).unwrap();
    assert_eq!(report.attacks.len(), 3);

    // the stored configuration reproduces itself
    let stored = RunConfig::load(&dir.join("resolved_config.toml"), None).unwrap();
    assert_eq!(stored.train.epochs, 1);
    assert_eq!(stored.data.train_subset, Some(200));
    assert_eq!(
        RunConfig::resolve(Some(&stored.to_toml()), None).unwrap(),
        stored
    );
}

#[test]
fn out_of_range_lambda_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let res = crdnd(&[
        "train",
        "--lambda",
        "1.5",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    let err = text(&res.stderr);
    assert!(err.contains("lambda") && err.contains("[0, 1]"), "{err}");
}

#[test]
fn paper_profile_banner_shows_published_hyperparameters() {
    let dir = tempfile::tempdir().unwrap();
    let res = crdnd(&[
        "train",
        "--profile",
        "paper",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let banner = text(&res.stdout);
    for line in [
        "lambda = 0.2",
        "tau1 = 0.5",
        "tau2 = 0.5",
        "lr0 = 0.1",
        "batch_size = 128",
        "epochs = 300",
    ] {
        assert!(
            banner.lines().any(|l| l.trim() == line),
            "banner lacks `{line}`"
        );
    }
    // no CIFAR directory is configured here
    assert_eq!(res.status.code(), Some(2));
    assert!(text(&res.stderr).contains("data_dir"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "seed = 5\n[train]\nepochs = 3\n[train.loss]\nlambda = 0.4\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let res = crdnd(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--epochs",
        "1",
        "--lambda",
        "2.0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    let banner = text(&res.stdout);
    assert!(banner.contains("seed = 5"));
    assert!(banner.contains("epochs = 1"));
    assert!(banner.contains("lambda = 2.0"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let res = crdnd(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(text(&res.stderr).contains("learning_rate"));
}

#[test]
fn eval_reports_each_attack_and_is_reproducible() {
    let ckpt = trained().join("last.ckpt");
    let dir = tempfile::tempdir().unwrap();
    let report = |name: &str, extra: &[&str]| {
        let path = dir.path().join(name);
        let mut args = vec![
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
            "--report",
            path.to_str().unwrap(),
            "--attacks",
            "fgsm,pgd_s,pgd_t",
        ];
        args.extend_from_slice(SMALL);
        args.extend_from_slice(extra);
        let res = crdnd(&args);
        assert!(res.status.success(), "{}", text(&res.stderr));
        path
    };
    let a = report("a.json", &[]);
    let b = report("b.json", &[]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let parsed = RobustnessReport::read(&a).unwrap();
    assert_eq!(
        parsed.attacks.keys().collect::<Vec<_>>(),
        ["fgsm", "pgd_s", "pgd_t"]
    );

    let zero = RobustnessReport::read(&report("zero.json", &["--epsilon", "0"])).unwrap();
    for rec in zero.attacks.values() {
        assert_eq!(rec.robust_accuracy, zero.clean_accuracy);
    }
}

#[test]
fn eval_without_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.ckpt");
    let res = crdnd(&[
        "eval",
        "--checkpoint",
        missing.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(text(&res.stderr).contains("absent.ckpt"));
}

#[test]
fn ablate_prints_four_rows_and_keeps_identity_without_acm() {
    let teacher = trained().join("teacher.ckpt");
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "ablate",
        "--epochs",
        "1",
        "--teacher",
        teacher.to_str().unwrap(),
        "--attacks",
        "fgsm,pgd_t",
        "--out",
        dir.path().to_str().unwrap(),
    ];
    args.extend_from_slice(SMALL);
    let res = crdnd(&args);
    assert!(res.status.success(), "{}", text(&res.stderr));
    let stdout = text(&res.stdout);
    let table: Vec<&str> = stdout
        .lines()
        .skip_while(|l| !l.starts_with("mode"))
        .take_while(|l| !l.is_empty())
        .collect();
    assert_eq!(table.len(), 5, "{stdout}");
    assert!(table[0].contains("fgsm") && table[0].contains("pgd_t") && !table[0].contains("pgd_s"));
    let modes: Vec<&str> = table[1..]
        .iter()
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    assert_eq!(modes, ["full", "no_acm", "no_nat", "no_adv"]);

    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let no_acm = read_log(&dir.path().join("no_acm/train_log.csv")).unwrap();
    assert!(no_acm
        .iter()
        .all(|r| r.m1_distance == 0.0 && r.m2_distance == 0.0));
}

#[test]
fn make_teacher_saves_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["make-teacher", "--out", dir.path().to_str().unwrap()];
    args.extend_from_slice(SMALL);
    let res = crdnd(&args);
    assert!(res.status.success(), "{}", text(&res.stderr));
    let ckpt = crdnd::model::checkpoint::load_checkpoint(&dir.path().join("teacher.ckpt")).unwrap();
    assert_eq!(ckpt.spec.num_classes, 10);
    assert!(dir.path().join("report.json").exists());
}
