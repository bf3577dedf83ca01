//! Paired desk-scale experiments on the spirals dataset: distilled versus
//! plain students (accuracy and robustness) and short versus long
//! integration horizons. Shared by `nodekd reproduce` and the acceptance
//! suite.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::Serialize;

use crate::attacks::{evaluate_under_attack, AttackConfig, AttackKind};
use crate::data::{gen_synthetic, AugmentConfig, Dataset, SyntheticKind};
use crate::distill::{distill_student, train_plain, train_teacher, DistillConfig, OptimizerKind, TrainConfig};
use crate::error::{Error, Result};
use crate::models::{accuracy, Activation, ArchKind, SolverSpec, StudentNet, StudentSpec, TeacherNet, TeacherSpec};

/// Fewer seeds than this produce a table without a verdict.
pub const MIN_SEEDS_FOR_VERDICT: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Claim {
    KdAccuracy,
    KdRobustness,
    HorizonRobustness,
}

impl Claim {
    pub const ALL: [Claim; 3] = [Claim::KdAccuracy, Claim::KdRobustness, Claim::HorizonRobustness];

    pub fn name(self) -> &'static str {
        match self {
            Claim::KdAccuracy => "kd-accuracy",
            Claim::KdRobustness => "kd-robustness",
            Claim::HorizonRobustness => "horizon-robustness",
        }
    }
}

impl fmt::Display for Claim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Claim {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Claim::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown claim {s:?} (kd-accuracy|kd-robustness|horizon-robustness)")))
    }
}

/// Everything that defines the paired experiments.
#[derive(Clone, Debug)]
pub struct SpiralsSetup {
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
    pub data_seed: u64,
    pub teacher: TeacherSpec,
    pub teacher_train: TrainConfig,
    /// One teacher, trained once with this seed, serves every student seed
    /// so that the seeds vary only the students.
    pub teacher_seed: u64,
    pub student: StudentSpec,
    /// Optimizer, learning rate and schedule shared by both arms.
    pub student_train: TrainConfig,
    pub temperature: f64,
    pub lambda: f64,
    /// Horizons compared by the horizon claim.
    pub horizons: (f64, f64),
    /// Largest epsilon, in units of 1/255 before feature scaling.
    pub attack_eps_255: f64,
    pub attack_feature_scale: f64,
    /// Number of test samples attacked (0 = all).
    pub attack_samples: usize,
}

impl SpiralsSetup {
    /// Configuration used by the acceptance suite.
    pub fn full() -> Self {
        let base = TrainConfig {
            epochs: 30,
            batch_size: 128,
            optimizer: OptimizerKind::Sgd,
            lr: 0.05,
            seed: 0,
            augment: AugmentConfig::none(),
            max_failures: 10,
        };
        Self {
            n_train: 2000,
            n_test: 1000,
            noise: 0.1,
            data_seed: 1,
            teacher: TeacherSpec {
                input: [1, 1, 2],
                classes: 2,
                width: 32,
                blocks: 8,
                kind: ArchKind::Dense,
                activation: Activation::Relu,
            },
            teacher_train: base.clone(),
            teacher_seed: 0,
            student: StudentSpec {
                input: [1, 1, 2],
                classes: 2,
                width: 16,
                kind: ArchKind::Dense,
                activation: Activation::Tanh,
                t1: 1.0,
                time_scale: 1.0,
                solver: SolverSpec::default(),
            },
            student_train: TrainConfig {
                epochs: 15,
                optimizer: OptimizerKind::Adam,
                lr: 0.01,
                ..base
            },
            temperature: 2.0,
            lambda: 0.9,
            horizons: (1.0, 5.0),
            attack_eps_255: 20.0,
            attack_feature_scale: 0.25,
            attack_samples: 0,
        }
    }

    /// A few-second version for smoke tests.
    pub fn quick() -> Self {
        let mut s = Self::full();
        s.n_train = 300;
        s.n_test = 200;
        s.teacher.blocks = 2;
        s.teacher_train.epochs = 5;
        s.student.width = 8;
        s.student_train.epochs = 3;
        s.attack_samples = 20;
        s
    }

    pub fn data(&self) -> Result<(Dataset, Dataset)> {
        let train = gen_synthetic(SyntheticKind::Spirals, self.n_train, self.noise, self.data_seed)?;
        let test = gen_synthetic(SyntheticKind::Spirals, self.n_test, self.noise, self.data_seed + 1)?;
        Ok((train, test))
    }

    fn student_cfg(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.student_train.clone()
        }
    }

    fn distill_cfg(&self, seed: u64) -> DistillConfig {
        DistillConfig {
            temperature: self.temperature,
            lambda: self.lambda,
            targets_on_augmented: false,
            train: self.student_cfg(seed),
        }
    }

    pub fn teacher(&self, train: &Dataset, test: &Dataset, seed: u64) -> Result<TeacherNet> {
        let cfg = TrainConfig {
            seed,
            ..self.teacher_train.clone()
        };
        Ok(train_teacher(train, test, self.teacher.clone(), &cfg)?.model)
    }

    pub fn plain(&self, train: &Dataset, test: &Dataset, seed: u64, t1: f64) -> Result<StudentNet> {
        let spec = StudentSpec { t1, ..self.student.clone() };
        Ok(train_plain(train, test, spec, &self.student_cfg(seed))?.model)
    }

    pub fn distilled(&self, train: &Dataset, test: &Dataset, teacher: &TeacherNet, seed: u64, t1: f64) -> Result<StudentNet> {
        let spec = StudentSpec { t1, ..self.student.clone() };
        Ok(distill_student(train, test, Some(teacher), spec, &self.distill_cfg(seed))?.model)
    }

    pub fn attack_config(&self, seed: u64) -> AttackConfig {
        AttackConfig {
            epsilon: self.attack_epsilon(),
            step_size: self.attack_feature_scale / 255.0,
            feature_scale: self.attack_feature_scale,
            seed,
            ..AttackConfig::default()
        }
    }

    pub fn attack_epsilon(&self) -> f64 {
        self.attack_eps_255 * self.attack_feature_scale / 255.0
    }

    /// PGD accuracy at the largest epsilon, with the mean nfe of the
    /// attacked forward passes.
    pub fn attacked_accuracy(&self, model: &StudentNet, test: &Dataset, seed: u64) -> Result<(f64, f64)> {
        let subset = match self.attack_samples {
            0 => test.clone(),
            n => test.take(n),
        };
        let cfg = self.attack_config(seed);
        let rep = evaluate_under_attack(model, &subset, AttackKind::Pgd, &[cfg.epsilon], &cfg)?;
        let e = &rep.entries[0];
        Ok((e.attacked_acc, e.mean_nfe))
    }
}

/// One seed of a paired comparison between arm `a` (baseline) and arm `b`.
#[derive(Clone, Debug, Serialize)]
pub struct PairRow {
    pub seed: u64,
    pub a: f64,
    pub b: f64,
    /// Further per-arm columns (attacked accuracy, nfe, ...).
    pub extra: Vec<(String, f64, f64)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClaimReport {
    pub claim: Claim,
    pub metric: String,
    pub arms: (String, String),
    pub rows: Vec<PairRow>,
    pub checks: Vec<Check>,
    /// `None` when there are too few seeds for a verdict.
    pub verdict: Option<bool>,
}

impl ClaimReport {
    fn new(claim: Claim, metric: &str, arms: (&str, &str), rows: Vec<PairRow>, checks: Vec<Check>) -> Self {
        let verdict = (rows.len() >= MIN_SEEDS_FOR_VERDICT).then(|| checks.iter().all(|c| c.passed));
        Self {
            claim,
            metric: metric.into(),
            arms: (arms.0.into(), arms.1.into()),
            rows,
            checks,
            verdict,
        }
    }

    pub fn mean_a(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.a))
    }

    pub fn mean_b(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.b))
    }

    pub fn mean_delta(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.b - r.a))
    }

    pub fn to_markdown(&self) -> String {
        let (a, b) = &self.arms;
        let mut s = format!("## {}\n\nMetric: {}\n\n", self.claim, self.metric);
        let extra: Vec<&str> = self.rows.first().map(|r| r.extra.iter().map(|e| e.0.as_str()).collect()).unwrap_or_default();
        let _ = write!(s, "| seed | {a} | {b} | delta |");
        for e in &extra {
            let _ = write!(s, " {e} ({a}) | {e} ({b}) |");
        }
        s.push_str("\n|---|---|---|---|");
        s.push_str(&"---|---|".repeat(extra.len()));
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "| {} | {:.4} | {:.4} | {:+.4} |", r.seed, r.a, r.b, r.b - r.a);
            for (_, x, y) in &r.extra {
                let _ = write!(s, " {x:.4} | {y:.4} |");
            }
            s.push('\n');
        }
        let _ = write!(s, "| mean | {:.4} | {:.4} | {:+.4} |", self.mean_a(), self.mean_b(), self.mean_delta());
        for i in 0..extra.len() {
            let ma = mean(self.rows.iter().map(|r| r.extra[i].1));
            let mb = mean(self.rows.iter().map(|r| r.extra[i].2));
            let _ = write!(s, " {ma:.4} | {mb:.4} |");
        }
        s.push_str("\n\n");
        for c in &self.checks {
            let _ = writeln!(s, "- [{}] {}: {}", if c.passed { "x" } else { " " }, c.name, c.detail);
        }
        let verdict = match self.verdict {
            Some(true) => "PASS".to_string(),
            Some(false) => "FAIL".to_string(),
            None => format!(
                "no verdict (insufficient replication: {} seed(s), need {MIN_SEEDS_FOR_VERDICT})",
                self.rows.len()
            ),
        };
        let _ = writeln!(s, "\nVerdict: {verdict}\n");
        s
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// At least 4 of every 5 seeds.
fn majority(wins: usize, n: usize) -> bool {
    n > 0 && 5 * wins >= 4 * n
}

/// Plain and distilled students trained on one seed, sharing data, teacher
/// and initialization stream.
pub struct Pair {
    pub seed: u64,
    pub teacher_acc: f64,
    pub plain: StudentNet,
    pub distilled: StudentNet,
    pub plain_acc: f64,
    pub distilled_acc: f64,
}

pub fn train_pair(
    setup: &SpiralsSetup,
    train: &Dataset,
    test: &Dataset,
    teacher: &TeacherNet,
    seed: u64,
) -> Result<Pair> {
    let t1 = setup.student.t1;
    let plain = setup.plain(train, test, seed, t1)?;
    let distilled = setup.distilled(train, test, teacher, seed, t1)?;
    Ok(Pair {
        seed,
        teacher_acc: accuracy(teacher, &test.images, &test.labels)?,
        plain_acc: accuracy(&plain, &test.images, &test.labels)?,
        distilled_acc: accuracy(&distilled, &test.images, &test.labels)?,
        plain,
        distilled,
    })
}

pub fn train_pairs(setup: &SpiralsSetup, seeds: &[u64]) -> Result<Vec<Pair>> {
    let (train, test) = setup.data()?;
    let teacher = setup.teacher(&train, &test, setup.teacher_seed)?;
    seeds.iter().map(|&s| train_pair(setup, &train, &test, &teacher, s)).collect()
}

pub fn kd_accuracy(pairs: &[Pair]) -> ClaimReport {
    let rows: Vec<PairRow> = pairs
        .iter()
        .map(|p| PairRow {
            seed: p.seed,
            a: p.plain_acc,
            b: p.distilled_acc,
            extra: vec![("teacher".into(), p.teacher_acc, p.teacher_acc)],
        })
        .collect();
    let mut r = ClaimReport::new(Claim::KdAccuracy, "clean test accuracy", ("plain", "distilled"), rows, vec![]);
    let d = r.mean_delta();
    r.checks = vec![
        Check {
            name: "mean delta > 0".into(),
            passed: d > 0.0,
            detail: format!("{d:+.4}"),
        },
        Check {
            name: "distilled mean >= plain mean + 2 points".into(),
            passed: r.mean_b() >= r.mean_a() + 0.02,
            detail: format!("{:.4} vs {:.4}", r.mean_b(), r.mean_a()),
        },
    ];
    r.verdict = (r.rows.len() >= MIN_SEEDS_FOR_VERDICT).then(|| r.checks.iter().all(|c| c.passed));
    r
}

pub fn kd_robustness(setup: &SpiralsSetup, pairs: &[Pair]) -> Result<ClaimReport> {
    let (_, test) = setup.data()?;
    let mut rows = Vec::new();
    for p in pairs {
        let (pa, _) = setup.attacked_accuracy(&p.plain, &test, p.seed)?;
        let (da, _) = setup.attacked_accuracy(&p.distilled, &test, p.seed)?;
        rows.push(PairRow {
            seed: p.seed,
            a: pa,
            b: da,
            extra: vec![("clean".into(), p.plain_acc, p.distilled_acc)],
        });
    }
    let wins = rows.iter().filter(|r| r.b >= r.a).count();
    let n = rows.len();
    let check = Check {
        name: "distilled attacked accuracy >= plain in >= 4/5 of seeds".into(),
        passed: majority(wins, n),
        detail: format!("{wins}/{n} seeds"),
    };
    Ok(ClaimReport::new(
        Claim::KdRobustness,
        &format!(
            "PGD accuracy at eps = {}/255 x {} (feature-scaled), {}",
            setup.attack_eps_255,
            setup.attack_feature_scale,
            match setup.attack_samples {
                0 => "all test samples".to_string(),
                n => format!("first {n} test samples"),
            }
        ),
        ("plain", "distilled"),
        rows,
        vec![check],
    ))
}

/// Distilled students with horizons `setup.horizons.0` and `.1`.
pub fn horizon_robustness(setup: &SpiralsSetup, seeds: &[u64]) -> Result<ClaimReport> {
    let (train, test) = setup.data()?;
    let (h0, h1) = setup.horizons;
    let teacher = setup.teacher(&train, &test, setup.teacher_seed)?;
    let mut rows = Vec::new();
    for &seed in seeds {
        let short = setup.distilled(&train, &test, &teacher, seed, h0)?;
        let long = setup.distilled(&train, &test, &teacher, seed, h1)?;
        let (ca, cb) = (
            accuracy(&short, &test.images, &test.labels)?,
            accuracy(&long, &test.images, &test.labels)?,
        );
        let (aa, na) = setup.attacked_accuracy(&short, &test, seed)?;
        let (ab, nb) = setup.attacked_accuracy(&long, &test, seed)?;
        rows.push(PairRow {
            seed,
            a: aa,
            b: ab,
            extra: vec![("clean".into(), ca, cb), ("nfe".into(), na, nb)],
        });
    }
    let n = rows.len();
    let wins = rows.iter().filter(|r| r.b >= r.a).count();
    let clean_gap = rows.iter().map(|r| (r.extra[0].2 - r.extra[0].1).abs()).fold(0.0, f64::max);
    let nfe_a = mean(rows.iter().map(|r| r.extra[1].1));
    let nfe_b = mean(rows.iter().map(|r| r.extra[1].2));
    let checks = vec![
        Check {
            name: format!("t1={h1} attacked accuracy >= t1={h0} in >= 4/5 of seeds"),
            passed: majority(wins, n),
            detail: format!("{wins}/{n} seeds"),
        },
        Check {
            name: "clean accuracies differ by < 5 points".into(),
            passed: clean_gap < 0.05,
            detail: format!("max gap {clean_gap:.4}"),
        },
        Check {
            name: format!("mean nfe(t1={h1}) > mean nfe(t1={h0})"),
            passed: nfe_b > nfe_a,
            detail: format!("{nfe_b:.1} vs {nfe_a:.1}"),
        },
    ];
    Ok(ClaimReport::new(
        Claim::HorizonRobustness,
        &format!(
            "PGD accuracy at eps = {}/255 x {} (feature-scaled), distilled students",
            setup.attack_eps_255, setup.attack_feature_scale
        ),
        (&format!("t1={h0}"), &format!("t1={h1}")),
        rows,
        checks,
    ))
}
