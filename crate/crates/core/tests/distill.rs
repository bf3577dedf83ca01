use nodekd::autodiff::{finite_diff_check, Tape, Tensor};
use nodekd::data::{gen_synthetic, AugmentConfig, SyntheticKind};
use nodekd::distill::{
    combined_loss, distill_student, kd_loss, loss_weights, soft_targets, train_plain, train_teacher, DistillConfig,
    OptimizerKind, TrainConfig,
};
use nodekd::models::{accuracy, Activation, ArchKind, Classifier, SolverSpec, StudentSpec, TeacherSpec};
use nodekd::{rng, Error};
use rand::Rng;

fn random(shape: &[usize], scale: f64, r: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(-scale..scale)).collect())
}

fn train_cfg(epochs: usize, optimizer: OptimizerKind, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        optimizer,
        lr,
        seed: 3,
        augment: AugmentConfig::none(),
        max_failures: 10,
    }
}

fn teacher_spec() -> TeacherSpec {
    TeacherSpec {
        input: [1, 1, 2],
        classes: 2,
        width: 16,
        blocks: 2,
        kind: ArchKind::Dense,
        activation: Activation::Relu,
    }
}

fn student_spec() -> StudentSpec {
    StudentSpec {
        input: [1, 1, 2],
        classes: 2,
        width: 6,
        kind: ArchKind::Dense,
        activation: Activation::Tanh,
        t1: 1.0,
        time_scale: 1.0,
        solver: SolverSpec::Rk4 { steps: 2 },
    }
}

#[test]
fn lambda_zero_distillation_is_plain_training() {
    let train = gen_synthetic(SyntheticKind::Moons, 200, 0.1, 1).unwrap();
    let test = gen_synthetic(SyntheticKind::Moons, 100, 0.1, 2).unwrap();
    let teacher = train_teacher(&train, &test, teacher_spec(), &train_cfg(2, OptimizerKind::Sgd, 0.05))
        .unwrap()
        .model;
    let tc = train_cfg(3, OptimizerKind::Adam, 0.01);
    let plain = train_plain(&train, &test, student_spec(), &tc).unwrap();
    let dc = DistillConfig {
        temperature: 10.0,
        lambda: 0.0,
        targets_on_augmented: false,
        train: tc,
    };
    let kd = distill_student(&train, &test, Some(&teacher), student_spec(), &dc).unwrap();
    // wall-clock times differ; everything else must not
    assert_eq!(plain.record.to_csv(), kd.record.to_csv());
    assert_eq!(plain.model.params().values(), kd.model.params().values());
}

#[test]
fn combined_loss_gradients_over_temperature_and_lambda() {
    let mut r = rng::stream(21, "loss", 0);
    let labels = [0, 2, 1, 2];
    for &t in &[1.0, 2.0, 5.0, 10.0, 20.0] {
        for &lambda in &[0.0, 0.1, 0.5, 0.9, 1.0] {
            let teacher = soft_targets(&random(&[4, 3], 3.0, &mut r), t).unwrap();
            let logits = random(&[4, 3], 2.0, &mut r);
            let rep = finite_diff_check(
                |tape, x| Ok(combined_loss(tape, x, Some(&teacher), &labels, t, lambda)?.0),
                &logits,
                1e-5,
            )
            .unwrap();
            assert!(rep.passed, "T={t} lambda={lambda}: {rep:?}");
        }
    }
}

#[test]
fn soft_targets_rows_sum_to_one_and_flatten_at_high_temperature() {
    let mut r = rng::stream(22, "soft", 0);
    let logits = random(&[50, 10], 20.0, &mut r);
    for t in [0.5, 1.0, 10.0, 1e6] {
        let p = soft_targets(&logits, t).unwrap();
        for i in 0..50 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
        if t == 1e6 {
            assert!(p.data().iter().all(|v| (v - 0.1).abs() < 1e-5));
        }
    }
    assert!(soft_targets(&logits, 0.0).is_err());
}

#[test]
fn kd_term_is_non_negative_and_zero_on_agreement() {
    let mut r = rng::stream(23, "kl", 0);
    for _ in 0..1000 {
        let t = r.gen_range(0.5..20.0);
        let s = random(&[1, 5], 5.0, &mut r);
        let teacher = soft_targets(&random(&[1, 5], 5.0, &mut r), t).unwrap();
        let mut tape = Tape::no_grad();
        let sv = tape.constant(s.clone());
        let kl = kd_loss(&mut tape, sv, &teacher, t).unwrap();
        assert!(tape.value(kl).item() >= -1e-12);

        let same = soft_targets(&s, t).unwrap();
        let kl = kd_loss(&mut tape, sv, &same, t).unwrap();
        assert!(tape.value(kl).item().abs() < 1e-12);
    }
}

#[test]
fn weights_at_default_setting() {
    let (ce, kd) = loss_weights(10.0, 0.9);
    assert!((ce - 0.1).abs() < 1e-15);
    assert!((kd - 90.0).abs() < 1e-12);
}

#[test]
fn zero_epochs_is_a_config_error() {
    let train = gen_synthetic(SyntheticKind::Moons, 20, 0.1, 1).unwrap();
    let r = train_plain(&train, &train, student_spec(), &train_cfg(0, OptimizerKind::Adam, 0.01));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn moons_teacher_is_accurate() {
    let train = gen_synthetic(SyntheticKind::Moons, 1000, 0.1, 1).unwrap();
    let test = gen_synthetic(SyntheticKind::Moons, 500, 0.1, 2).unwrap();
    let t = train_teacher(&train, &test, teacher_spec(), &train_cfg(15, OptimizerKind::Sgd, 0.05))
        .unwrap()
        .model;
    let acc = accuracy(&t, &test.images, &test.labels).unwrap();
    assert!(acc >= 0.95, "{acc}");
}
