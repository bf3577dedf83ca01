use std::time::Instant;

use super::loss::{combined_loss, soft_targets, LossParts};
use super::optim::{lr_schedule, Optimizer, OptimizerKind};
use super::record::{EpochRecord, TrainRecord};
use crate::autodiff::{Tape, Tensor};
use crate::data::{augment, batch_iter, AugmentConfig, Dataset, NormStats};
use crate::error::{Error, Result};
use crate::models::{accuracy_of, evaluate, Classifier, Params, StudentNet, StudentSpec, TeacherNet, TeacherSpec};
use crate::rng::{self, derive_seed};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Consecutive failed batches (non-finite values, solver divergence)
    /// tolerated before training is abandoned.
    pub max_failures: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.max_failures == 0 {
            return Err(Error::Config("max_failures must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub temperature: f64,
    pub lambda: f64,
    /// Query the teacher on each augmented view instead of caching its soft
    /// targets on the clean images once.
    pub targets_on_augmented: bool,
    pub train: TrainConfig,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.train.epochs == 0 {
            return Err(Error::Config("distillation needs at least one epoch".into()));
        }
        self.train.validate()
    }
}

/// A trained model plus its history. `record.aborted` is set when training
/// stopped on repeated numeric failures; the model is then the best one seen
/// before that.
pub struct Trained<M> {
    pub model: M,
    pub record: TrainRecord,
}

enum Targets<'a> {
    None,
    Cached(Tensor),
    Online(&'a TeacherNet),
}

struct Objective<'a> {
    targets: Targets<'a>,
    temperature: f64,
    lambda: f64,
}

pub fn train_teacher(train: &Dataset, test: &Dataset, spec: TeacherSpec, cfg: &TrainConfig) -> Result<Trained<TeacherNet>> {
    cfg.validate()?;
    check_classes(train, spec.classes)?;
    let stats = NormStats::from_dataset(train)?;
    let mut model = TeacherNet::new(spec, &stats, &mut rng::stream(cfg.seed, "init", 0))?;
    let objective = Objective {
        targets: Targets::None,
        temperature: 1.0,
        lambda: 0.0,
    };
    let record = fit(&mut model, train, test, cfg, &objective)?;
    Ok(Trained { model, record })
}

/// Trains a student on `(1 - λ) CE + λ T² KL(teacher || student)`. With
/// `λ = 0` the teacher is never consulted.
pub fn distill_student(
    train: &Dataset,
    test: &Dataset,
    teacher: Option<&TeacherNet>,
    spec: StudentSpec,
    cfg: &DistillConfig,
) -> Result<Trained<StudentNet>> {
    cfg.validate()?;
    check_classes(train, spec.classes)?;
    let targets = if cfg.lambda == 0.0 {
        Targets::None
    } else {
        let teacher = teacher.ok_or_else(|| Error::Config("distillation with lambda > 0 needs a teacher".into()))?;
        if teacher.classes() != spec.classes {
            return Err(Error::Config(format!(
                "teacher predicts {} classes, student {}",
                teacher.classes(),
                spec.classes
            )));
        }
        if cfg.targets_on_augmented {
            Targets::Online(teacher)
        } else {
            let logits = evaluate(teacher, &train.images)?.logits;
            Targets::Cached(soft_targets(&logits, cfg.temperature)?)
        }
    };
    let stats = NormStats::from_dataset(train)?;
    let mut model = StudentNet::new(spec, &stats, &mut rng::stream(cfg.train.seed, "init", 0))?;
    let objective = Objective {
        targets,
        temperature: cfg.temperature,
        lambda: cfg.lambda,
    };
    let record = fit(&mut model, train, test, &cfg.train, &objective)?;
    Ok(Trained { model, record })
}

/// Cross-entropy training of a student with no teacher.
pub fn train_plain(train: &Dataset, test: &Dataset, spec: StudentSpec, cfg: &TrainConfig) -> Result<Trained<StudentNet>> {
    let dcfg = DistillConfig {
        temperature: 1.0,
        lambda: 0.0,
        targets_on_augmented: false,
        train: cfg.clone(),
    };
    distill_student(train, test, None, spec, &dcfg)
}

fn check_classes(ds: &Dataset, classes: usize) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if ds.classes > classes {
        return Err(Error::Config(format!(
            "dataset {} has {} classes, model {}",
            ds.name, ds.classes, classes
        )));
    }
    Ok(())
}

struct BatchOutcome {
    parts: LossParts,
    correct: usize,
    nfe: usize,
    grads: Vec<Tensor>,
}

fn run_batch(model: &dyn Classifier, x: &Tensor, labels: &[usize], soft: Option<&Tensor>, obj: &Objective) -> Result<BatchOutcome> {
    let mut tape = Tape::new();
    let p = model.params().on_tape(&mut tape, true);
    let xv = tape.constant(x.clone());
    let out = model.forward(&mut tape, &p, xv)?;
    let (loss, parts) = combined_loss(&mut tape, out.logits, soft, labels, obj.temperature, obj.lambda)?;
    let correct = accuracy_of(&tape.value(out.logits).argmax_rows(), labels) * labels.len() as f64;
    let grads = tape.backward(loss)?;
    let grads: Vec<Tensor> = model
        .params()
        .iter()
        .zip(&p)
        .filter(|(param, _)| param.trainable())
        .map(|(_, &v)| grads.wrt(v))
        .collect();
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericFault { op: "backward" });
    }
    Ok(BatchOutcome {
        parts,
        correct: correct.round() as usize,
        nfe: out.nfe,
        grads,
    })
}

fn fit(model: &mut dyn Classifier, train: &Dataset, test: &Dataset, cfg: &TrainConfig, obj: &Objective) -> Result<TrainRecord> {
    let mut record = TrainRecord::default();
    let mut best: Option<(f64, Params)> = None;
    let mut opt = Optimizer::new(cfg.optimizer, model.params());
    let mut consecutive = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_schedule(cfg.lr, epoch, cfg.epochs);
        let batches = batch_iter(train.len(), cfg.batch_size, Some(derive_seed(cfg.seed, "shuffle", epoch as u64)));
        let mut aug_rng = rng::stream(cfg.seed, "augment", epoch as u64);
        let mut sums = LossParts::default();
        let (mut seen, mut correct, mut nfe, mut skipped) = (0usize, 0usize, 0usize, 0usize);
        for idx in &batches {
            let x = augment(&train.images.select_rows(idx), &cfg.augment, &mut aug_rng);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let soft = match &obj.targets {
                Targets::None => None,
                Targets::Cached(all) => Some(all.select_rows(idx)),
                Targets::Online(teacher) => Some(soft_targets(&evaluate(*teacher, &x)?.logits, obj.temperature)?),
            };
            match run_batch(model, &x, &labels, soft.as_ref(), obj) {
                Ok(b) => {
                    consecutive = 0;
                    opt.step(model.params_mut(), &b.grads, lr);
                    let w = labels.len() as f64;
                    sums.sl += b.parts.sl * w;
                    sums.kd += b.parts.kd * w;
                    sums.total += b.parts.total * w;
                    seen += labels.len();
                    correct += b.correct;
                    nfe += b.nfe * labels.len();
                }
                Err(e) if e.is_numeric() => {
                    skipped += 1;
                    consecutive += 1;
                    if consecutive >= cfg.max_failures {
                        record.aborted = Some(format!("epoch {epoch}: {consecutive} consecutive failed batches, last: {e}"));
                        break 'epochs;
                    }
                }
                Err(e) => return Err(e),
            }
        }
        let eval = evaluate(model, &test.images);
        let test_acc = match eval {
            Ok(ev) => accuracy_of(&ev.logits.argmax_rows(), &test.labels),
            Err(e) if e.is_numeric() => {
                record.aborted = Some(format!("epoch {epoch}: evaluation failed: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let denom = seen.max(1) as f64;
        record.epochs.push(EpochRecord {
            epoch,
            lr,
            loss_sl: sums.sl / denom,
            loss_kd: sums.kd / denom,
            loss_total: sums.total / denom,
            train_acc: correct as f64 / denom,
            test_acc,
            mean_nfe: nfe as f64 / denom,
            skipped_batches: skipped,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().map_or(true, |(acc, _)| test_acc > *acc) {
            best = Some((test_acc, model.params().clone()));
            record.best_epoch = Some(epoch);
        }
    }
    if let Some((acc, params)) = best {
        record.best_test_acc = Some(acc);
        *model.params_mut() = params;
    }
    Ok(record)
}
