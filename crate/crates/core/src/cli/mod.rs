//! Subcommand implementations behind the `nodekd` binary.

mod config;
mod plot;

pub use config::{parse_kv, Command, RunConfig, OUT_ROOT_ENV};
pub use plot::{accuracy_plot, Series};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::attacks::{evaluate_under_attack, AttackConfig, AttackKind, AttackReport};
use crate::data::{gen_synthetic, load_csv, load_idx, AugmentConfig, Dataset, SyntheticKind};
use crate::distill::{distill_student, train_teacher, DistillConfig, TrainConfig, TrainRecord};
use crate::error::{Error, Result};
use crate::experiments::{self, Claim, SpiralsSetup};
use crate::fsutil::write_atomic;
use crate::models::{
    load_checkpoint, load_teacher, parse_shape, save_checkpoint, teacher_preset_blocks, Model, SolverSpec, StudentSpec,
    TeacherSpec,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        return EXIT_NUMERIC;
    }
    match e {
        Error::Config(_)
        | Error::Io(_)
        | Error::CheckpointVersion { .. }
        | Error::CheckpointCorrupt(_)
        | Error::CheckpointShape { .. }
        | Error::CheckpointKind { .. }
        | Error::IdxMagic { .. }
        | Error::IdxCountMismatch { .. }
        | Error::Truncated { .. }
        | Error::Parse { .. }
        | Error::EmptyDataset => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

/// Runs one command and returns the process exit code; errors are reported
/// on stderr.
pub fn run(command: Command, config: Option<&Path>, overrides: &[String]) -> i32 {
    let result = RunConfig::load(command, config, overrides).and_then(|cfg| execute(&cfg));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("nodekd {command}: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cfg: &RunConfig) -> Result<()> {
    match cfg.command {
        Command::TrainTeacher => cmd_train_teacher(cfg),
        Command::TrainPlain => cmd_train_student(cfg, false),
        Command::Distill => cmd_train_student(cfg, true),
        Command::Attack => cmd_attack(cfg),
        Command::Reproduce => cmd_reproduce(cfg),
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    write_atomic(&p, contents.as_bytes())?;
    Ok(p)
}

pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let required = |key: &str| {
        cfg.path(key)
            .ok_or_else(|| Error::Config(format!("{key} is required for data.kind={}", cfg.raw("data.kind"))))
    };
    let (train, test) = match cfg.raw("data.kind") {
        "synthetic" => {
            let kind: SyntheticKind = cfg.raw("data.synthetic").parse()?;
            let seed: u64 = cfg.get("data.seed")?;
            let noise: f64 = cfg.get("data.noise")?;
            (
                gen_synthetic(kind, cfg.get("data.n_train")?, noise, seed)?,
                gen_synthetic(kind, cfg.get("data.n_test")?, noise, seed + 1)?,
            )
        }
        "idx" => (
            load_idx(&required("data.train_images")?, &required("data.train_labels")?)?,
            load_idx(&required("data.test_images")?, &required("data.test_labels")?)?,
        ),
        "csv" => {
            let shape = parse_shape(cfg.raw("data.shape"))?;
            (
                load_csv(&required("data.train_csv")?, shape)?,
                load_csv(&required("data.test_csv")?, shape)?,
            )
        }
        other => return Err(Error::Config(format!("unknown data.kind {other:?} (synthetic|idx|csv)"))),
    };
    let limit = |ds: Dataset, key: &str| -> Result<Dataset> {
        let n: usize = cfg.get(key)?;
        Ok(if n > 0 { ds.take(n) } else { ds })
    };
    Ok((limit(train, "data.limit_train")?, limit(test, "data.limit_test")?))
}

fn classes(train: &Dataset, test: &Dataset) -> usize {
    train.classes.max(test.classes)
}

fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let augment = AugmentConfig {
        crop: cfg.get_bool("augment.crop")?,
        pad: cfg.get("augment.pad")?,
        flip: cfg.get_bool("augment.flip")?,
        flip_prob: cfg.get("augment.flip_prob")?,
    };
    let tc = TrainConfig {
        epochs: cfg.get("train.epochs")?,
        batch_size: cfg.get("train.batch_size")?,
        optimizer: cfg.raw("train.optimizer").parse()?,
        lr: cfg.get("train.lr")?,
        seed: cfg.get("seed")?,
        augment,
        max_failures: cfg.get("train.max_failures")?,
    };
    tc.validate()?;
    Ok(tc)
}

/// Resolved config for embedding in metrics; the output location is left
/// out so that reruns elsewhere produce identical files.
fn meta_of(cfg: &RunConfig) -> BTreeMap<String, String> {
    cfg.pairs()
        .into_iter()
        .filter(|(k, _)| k != "out")
        .map(|(k, v)| (format!("config.{k}"), v))
        .collect()
}

/// Checkpoint, metrics (CSV + JSON), timing and the config snapshot. A
/// training run that aborted on numeric failures still writes its outputs
/// and then reports a numeric error.
fn write_training_outputs(dir: &Path, model: &Model, extra: &[(String, String)], record: &TrainRecord, cfg: &RunConfig) -> Result<()> {
    let name = match model {
        Model::Teacher(_) => "teacher.nodk",
        Model::Student(_) => "student.nodk",
    };
    save_checkpoint(model, extra, &dir.join(name))?;
    let mut meta = meta_of(cfg);
    meta.extend(extra.iter().cloned());
    write(dir, "metrics.csv", &record.to_csv())?;
    write(dir, "metrics.json", &record.to_json(&meta))?;
    write(dir, "timing.csv", &record.timing_csv())?;
    if let Some(reason) = &record.aborted {
        return Err(Error::TrainingDiverged {
            epoch: record.epochs.len(),
            reason: reason.clone(),
        });
    }
    Ok(())
}

fn report_accuracy(what: &str, record: &TrainRecord, dir: &Path) {
    match record.best_test_acc {
        Some(acc) => eprintln!("{what}: best test accuracy {acc:.4}; outputs in {}", dir.display()),
        None => eprintln!("{what}: no epochs run; outputs in {}", dir.display()),
    }
}

fn cmd_train_teacher(cfg: &RunConfig) -> Result<()> {
    let tc = train_config(cfg)?;
    let preset = cfg.raw("teacher.preset");
    let (train, test) = load_data(cfg)?;
    let spec = TeacherSpec {
        input: train.image_shape(),
        classes: classes(&train, &test),
        width: cfg.get("teacher.width")?,
        blocks: teacher_preset_blocks(preset)?,
        kind: cfg.raw("teacher.kind").parse()?,
        activation: cfg.raw("teacher.activation").parse()?,
    };
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir)?;
    write(&dir, "config.txt", &cfg.snapshot())?;
    let trained = train_teacher(&train, &test, spec, &tc)?;
    let extra = vec![("run".to_string(), "teacher".to_string()), ("teacher.preset".into(), preset.into())];
    write_training_outputs(&dir, &Model::Teacher(trained.model), &extra, &trained.record, cfg)?;
    report_accuracy("teacher", &trained.record, &dir);
    Ok(())
}

fn cmd_train_student(cfg: &RunConfig, distill: bool) -> Result<()> {
    let tc = train_config(cfg)?;
    let (temperature, lambda) = if distill {
        (cfg.get("distill.temperature")?, cfg.get("distill.lambda")?)
    } else {
        (1.0, 0.0)
    };
    let targets_on_augmented = distill && cfg.get_bool("distill.targets_on_augmented")?;
    let dc = DistillConfig {
        temperature,
        lambda,
        targets_on_augmented,
        train: tc,
    };
    dc.validate()?;
    let t1: f64 = cfg.get("student.t1")?;
    let solver: SolverSpec = cfg.raw("student.solver").parse()?;
    let width: usize = cfg.get("student.width")?;
    let kind = cfg.raw("student.kind").parse()?;
    let activation = cfg.raw("student.activation").parse()?;
    let teacher = if distill && lambda > 0.0 {
        let path = cfg
            .path("distill.teacher")
            .ok_or_else(|| Error::Config("distill.teacher (teacher checkpoint) is required when lambda > 0".into()))?;
        Some(load_teacher(&path)?.0)
    } else {
        None
    };
    let (train, test) = load_data(cfg)?;
    let spec = StudentSpec {
        input: train.image_shape(),
        classes: classes(&train, &test),
        width,
        kind,
        activation,
        t1,
        time_scale: 1.0,
        solver,
    };
    if let Some(t) = &teacher {
        use crate::models::Classifier;
        if t.classes() != spec.classes {
            return Err(Error::Config(format!(
                "teacher predicts {} classes but the data has {}",
                t.classes(),
                spec.classes
            )));
        }
        if t.input_shape() != spec.input {
            return Err(Error::Config(format!(
                "teacher expects inputs {:?} but the data has {:?}",
                t.input_shape(),
                spec.input
            )));
        }
    }
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir)?;
    write(&dir, "config.txt", &cfg.snapshot())?;
    let trained = distill_student(&train, &test, teacher.as_ref(), spec, &dc)?;
    let label = if lambda == 0.0 { "plain" } else { "distilled" };
    let extra = vec![
        ("run".to_string(), label.to_string()),
        ("distill.temperature".into(), temperature.to_string()),
        ("distill.lambda".into(), lambda.to_string()),
        ("horizon".into(), t1.to_string()),
    ];
    write_training_outputs(&dir, &Model::Student(trained.model), &extra, &trained.record, cfg)?;
    report_accuracy(label, &trained.record, &dir);
    Ok(())
}

fn cmd_attack(cfg: &RunConfig) -> Result<()> {
    let kinds: Vec<AttackKind> = cfg.list("attack.kinds")?;
    if kinds.is_empty() {
        return Err(Error::Config("attack.kinds is empty".into()));
    }
    let scale: f64 = cfg.get("attack.eps_scale")?;
    let grid_255: Vec<f64> = cfg.list("attack.eps_grid")?;
    if grid_255.is_empty() {
        return Err(Error::Config("attack.eps_grid is empty".into()));
    }
    if grid_255.windows(2).any(|w| w[0] > w[1]) || grid_255.iter().any(|e| !(*e >= 0.0)) {
        return Err(Error::Config("attack.eps_grid must be non-negative and ascending".into()));
    }
    let steps = match cfg.raw("attack.steps") {
        "auto" => None,
        _ => Some(cfg.get::<usize>("attack.steps")?),
    };
    let base = AttackConfig {
        epsilon: 0.0,
        step_size: cfg.get::<f64>("attack.step_size")? * scale / 255.0,
        steps,
        momentum: cfg.get("attack.momentum")?,
        random_start: cfg.get_bool("attack.random_start")?,
        seed: cfg.get("seed")?,
        feature_scale: scale,
        ..AttackConfig::default()
    };
    base.validate()?;
    let path = cfg
        .path("attack.checkpoint")
        .ok_or_else(|| Error::Config("attack.checkpoint is required".into()))?;
    let (model, model_meta) = load_checkpoint(&path)?;
    let (_, test) = load_data(cfg)?;
    let limit: usize = cfg.get("attack.limit")?;
    let test = if limit > 0 { test.take(limit) } else { test };
    let grid: Vec<f64> = grid_255.iter().map(|e| e * scale / 255.0).collect();

    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir)?;
    write(&dir, "config.txt", &cfg.snapshot())?;
    let mut meta = meta_of(cfg);
    meta.extend(model_meta.into_iter().map(|(k, v)| (format!("model.{k}"), v)));
    let mut series = Vec::new();
    for kind in kinds {
        let rep: AttackReport = evaluate_under_attack(model.as_classifier(), &test, kind, &grid, &base)?;
        write(&dir, &format!("attack_{kind}.csv"), &rep.to_csv())?;
        write(&dir, &format!("attack_{kind}.json"), &rep.to_json(&meta))?;
        if let Some(e) = rep.last() {
            eprintln!(
                "{kind}: clean {:.4}, attacked {:.4} at eps {:.5}",
                e.clean_acc, e.attacked_acc, e.epsilon
            );
        }
        series.push(Series {
            name: kind.to_string(),
            points: grid_255.iter().zip(&rep.entries).map(|(k, e)| (*k, e.attacked_acc)).collect(),
        });
    }
    let x_label = if scale == 1.0 {
        "epsilon (x 1/255)".to_string()
    } else {
        format!("epsilon (x {scale}/255)")
    };
    let title = format!("accuracy under attack: {}", path.display());
    write(&dir, "attack.svg", &accuracy_plot(&title, &x_label, &series))?;
    eprintln!("attack: outputs in {}", dir.display());
    Ok(())
}

fn cmd_reproduce(cfg: &RunConfig) -> Result<()> {
    let claims: Vec<Claim> = match cfg.raw("reproduce.claim") {
        "all" => Claim::ALL.to_vec(),
        c => vec![c.parse()?],
    };
    let n: u64 = cfg.get("reproduce.seeds")?;
    if n == 0 {
        return Err(Error::Config("reproduce.seeds must be >= 1".into()));
    }
    let mut setup = match cfg.raw("reproduce.scale") {
        "full" => SpiralsSetup::full(),
        "quick" => SpiralsSetup::quick(),
        s => return Err(Error::Config(format!("unknown reproduce.scale {s:?} (full|quick)"))),
    };
    let master: u64 = cfg.get("seed")?;
    setup.teacher_seed = master;
    let seeds: Vec<u64> = (0..n).map(|i| master + i).collect();
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir)?;
    write(&dir, "config.txt", &cfg.snapshot())?;

    let needs_pairs = claims.iter().any(|c| matches!(c, Claim::KdAccuracy | Claim::KdRobustness));
    let pairs = if needs_pairs {
        experiments::train_pairs(&setup, &seeds)?
    } else {
        Vec::new()
    };
    let mut reports = Vec::new();
    for claim in claims {
        let rep = match claim {
            Claim::KdAccuracy => experiments::kd_accuracy(&pairs),
            Claim::KdRobustness => experiments::kd_robustness(&setup, &pairs)?,
            Claim::HorizonRobustness => experiments::horizon_robustness(&setup, &seeds)?,
        };
        eprintln!("{claim}: {}", match rep.verdict {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "no verdict",
        });
        reports.push(rep);
    }
    let mut md = String::from("# Reproduction summary\n\n");
    for r in &reports {
        md.push_str(&r.to_markdown());
    }
    write(&dir, "summary.md", &md)?;
    let json = serde_json::to_string_pretty(&reports).expect("reports serialize") + "\n";
    write(&dir, "results.json", &json)?;
    eprintln!("reproduce: outputs in {}", dir.display());
    Ok(())
}
