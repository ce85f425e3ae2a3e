use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crdnd::config::RunConfig;
use crdnd::data::{load_dataset, Dataset, DatasetSpec, Split};
use crdnd::evaluation::{evaluate_report, RobustnessReport};
use crdnd::model::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
use crdnd::model::Model;
use crdnd::rng;
use crdnd::training::baseline::{train_baseline, BaselineEpoch, BaselineKind};
use crdnd::training::{run_training, Ablation, EpochLog, TrainOutcome, TrainState};

use crate::CliError;

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const TEACHER_CHECKPOINT: &str = "teacher.ckpt";
pub const TEACHER_LOG: &str = "teacher_log.csv";
pub const REPORT: &str = "report.json";
pub const ABLATION_TABLE: &str = "ablation.csv";

/// Prints the resolved configuration, validates it and stores it in the output directory.
pub fn prepare(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    println!("crdnd {} {command}", env!("CARGO_PKG_VERSION"));
    println!("# resolved configuration");
    print!("{}", cfg.to_toml());
    println!("# end of configuration");
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::io(&cfg.out_dir, e))?;
    let path = cfg.out_dir.join(RESOLVED_CONFIG);
    fs::write(&path, cfg.to_toml()).map_err(|e| CliError::io(&path, e))
}

fn dataset(cfg: &RunConfig, split: Split) -> Result<Dataset, CliError> {
    let spec = DatasetSpec {
        source: cfg.data.dataset,
        split,
        subset: match split {
            Split::Train => cfg.data.train_subset,
            Split::Test => cfg.data.test_subset,
        },
        augment: cfg.data.augment && split == Split::Train,
        seed: cfg.seed,
    };
    let ds = load_dataset(&spec, cfg.data.data_dir.as_deref(), &cfg.toy)?;
    log::info!("{} {:?}: {} images", cfg.data.dataset, split, ds.len());
    Ok(ds)
}

/// Loads the configured teacher or, without one, trains it adversarially and saves it
/// under the output directory.
fn teacher(cfg: &RunConfig, train: &Dataset) -> Result<Model<f32>, CliError> {
    let spec = cfg.model_spec();
    if let Some(path) = &cfg.teacher {
        if !path.exists() {
            return Err(CliError::Usage(format!(
                "teacher checkpoint {} does not exist",
                path.display()
            )));
        }
        let ckpt = load_checkpoint_for(path, &spec)?;
        log::info!("loaded teacher from {}", path.display());
        return Ok(Model::from_parts(ckpt.spec, ckpt.params)?);
    }
    let tcfg = cfg.teacher_train_config();
    log::info!(
        "training a teacher: {} epochs of PGD adversarial training, lr {}",
        tcfg.epochs,
        tcfg.lr0
    );
    let mut model = Model::new(spec, &mut rng::stream(cfg.seed, rng::INIT_TEACHER, &[]))?;
    let kind = BaselineKind::Adversarial {
        attack: cfg.teacher_attack(),
        warmup_epochs: cfg.teacher_warmup_epochs,
    };
    let log_rows = train_baseline(&mut model, train, &tcfg, kind)?;
    write_teacher_log(&cfg.out_dir.join(TEACHER_LOG), &log_rows)?;
    let mut ckpt = TrainState::new(model.clone(), &tcfg).to_checkpoint();
    ckpt.epoch = tcfg.epochs as u64;
    save_checkpoint(&ckpt, &cfg.out_dir.join(TEACHER_CHECKPOINT))?;
    Ok(model)
}

fn write_teacher_log(path: &Path, rows: &[BaselineEpoch]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::io(path, e.into()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// The model a finished run is judged by: the best selection checkpoint, else the last.
fn final_student(outcome: &TrainOutcome) -> Result<Model<f32>, CliError> {
    match &outcome.best {
        Some(best) => Ok(Model::from_parts(best.spec, best.params.clone())?),
        None => Ok(outcome.state.student.clone()),
    }
}

struct RunResult {
    report: RobustnessReport,
    last: EpochLog,
}

fn train_student(
    cfg: &RunConfig,
    ablation: Ablation,
    train: &Dataset,
    test: &Dataset,
    teacher: &Model<f32>,
    out_dir: &Path,
) -> Result<RunResult, CliError> {
    let tcfg = crdnd::training::TrainConfig {
        ablation,
        ..cfg.train_config()
    };
    let student = Model::new(
        cfg.model_spec(),
        &mut rng::stream(cfg.seed, rng::INIT_STUDENT, &[]),
    )?;
    log::info!("training student ({ablation}) for {} epochs", tcfg.epochs);
    let outcome = run_training(
        &tcfg,
        train,
        test,
        teacher,
        TrainState::new(student, &tcfg),
        Some(out_dir),
    )?;
    let model = final_student(&outcome)?;
    let model_id = format!("{}-w{}/{ablation}", cfg.model.architecture, cfg.model.width);
    let report = evaluate_report(
        &model,
        test,
        &cfg.eval.attack_specs()?,
        cfg.eval.batch_size,
        cfg.seed,
        &model_id,
        &format!("{}/test", cfg.data.dataset),
    )?;
    report.write(&out_dir.join(REPORT))?;
    let last = outcome.log.last().cloned().expect("at least one epoch");
    Ok(RunResult { report, last })
}

fn print_report(report: &RobustnessReport) {
    println!("clean accuracy: {:.2}%", report.clean_accuracy);
    for (name, rec) in &report.attacks {
        println!(
            "{name}: robust {:.2}%, strict {:.2}% (eps {:.5}, {} steps)",
            rec.robust_accuracy, rec.strict_robust_accuracy, rec.spec.epsilon, rec.spec.steps
        );
    }
}

pub fn train(cfg: &RunConfig, ablation: Option<Ablation>) -> Result<(), CliError> {
    let ablation = ablation.unwrap_or(cfg.train.ablation);
    let train = dataset(cfg, Split::Train)?;
    let test = dataset(cfg, Split::Test)?;
    let teacher = teacher(cfg, &train)?;
    let result = train_student(cfg, ablation, &train, &test, &teacher, &cfg.out_dir)?;
    print_report(&result.report);
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}

pub fn make_teacher(cfg: &RunConfig) -> Result<(), CliError> {
    let train = dataset(cfg, Split::Train)?;
    let test = dataset(cfg, Split::Test)?;
    let cfg = RunConfig {
        teacher: None,
        ..cfg.clone()
    };
    let model = teacher(&cfg, &train)?;
    let report = evaluate_report(
        &model,
        &test,
        &cfg.eval.attack_specs()?,
        cfg.eval.batch_size,
        cfg.seed,
        &format!("{}-w{}/teacher", cfg.model.architecture, cfg.model.width),
        &format!("{}/test", cfg.data.dataset),
    )?;
    report.write(&cfg.out_dir.join(REPORT))?;
    print_report(&report);
    println!(
        "teacher saved to {}",
        cfg.out_dir.join(TEACHER_CHECKPOINT).display()
    );
    Ok(())
}

pub fn eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    report_path: Option<PathBuf>,
) -> Result<(), CliError> {
    if !checkpoint.exists() {
        return Err(CliError::Usage(format!(
            "checkpoint {} does not exist",
            checkpoint.display()
        )));
    }
    let ckpt = load_checkpoint(checkpoint)?;
    if ckpt.spec.num_classes != cfg.num_classes() {
        return Err(CliError::Usage(format!(
            "checkpoint {} has {} classes but {} has {}",
            checkpoint.display(),
            ckpt.spec.num_classes,
            cfg.data.dataset,
            cfg.num_classes()
        )));
    }
    let model = Model::from_parts(ckpt.spec, ckpt.params)?;
    let test = dataset(cfg, Split::Test)?;
    let model_id = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let report = evaluate_report(
        &model,
        &test,
        &cfg.eval.attack_specs()?,
        cfg.eval.batch_size,
        cfg.seed,
        &model_id,
        &format!("{}/test", cfg.data.dataset),
    )?;
    let path = report_path.unwrap_or_else(|| cfg.out_dir.join(REPORT));
    report.write(&path)?;
    print_report(&report);
    println!("report written to {}", path.display());
    Ok(())
}

pub fn ablate(cfg: &RunConfig) -> Result<(), CliError> {
    let train = dataset(cfg, Split::Train)?;
    let test = dataset(cfg, Split::Test)?;
    let teacher = teacher(cfg, &train)?;
    let mut rows = Vec::new();
    for mode in Ablation::ALL {
        let dir = cfg.out_dir.join(mode.id());
        let result = train_student(cfg, mode, &train, &test, &teacher, &dir)?;
        rows.push((mode, result));
    }
    let table = ablation_table(&cfg.eval.attacks, &rows);
    print!("{table}");
    let path = cfg.out_dir.join(ABLATION_TABLE);
    fs::write(&path, ablation_csv(&cfg.eval.attacks, &rows)).map_err(|e| CliError::io(&path, e))
}

fn mode_label(mode: Ablation) -> &'static str {
    match mode {
        Ablation::None => "full",
        other => other.id(),
    }
}

fn ablation_table(attacks: &[String], rows: &[(Ablation, RunResult)]) -> String {
    let mut s = format!("{:<8} {:>8}", "mode", "clean");
    for a in attacks {
        let _ = write!(s, " {a:>8}");
    }
    s.push_str("   |M1-I|   |M2-I|\n");
    for (mode, r) in rows {
        let _ = write!(
            s,
            "{:<8} {:>8.2}",
            mode_label(*mode),
            r.report.clean_accuracy
        );
        for a in attacks {
            let _ = write!(s, " {:>8.2}", r.report.attacks[a].robust_accuracy);
        }
        let _ = writeln!(
            s,
            " {:>8.4} {:>8.4}",
            r.last.m1_distance, r.last.m2_distance
        );
    }
    s
}

fn ablation_csv(attacks: &[String], rows: &[(Ablation, RunResult)]) -> String {
    let mut s = String::from("mode,clean");
    for a in attacks {
        let _ = write!(s, ",{a}");
    }
    s.push_str(",m1_distance,m2_distance\n");
    for (mode, r) in rows {
        let _ = write!(s, "{},{}", mode_label(*mode), r.report.clean_accuracy);
        for a in attacks {
            let _ = write!(s, ",{}", r.report.attacks[a].robust_accuracy);
        }
        let _ = writeln!(s, ",{},{}", r.last.m1_distance, r.last.m2_distance);
    }
    s
}
