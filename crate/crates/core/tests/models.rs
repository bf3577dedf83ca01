use nodekd::autodiff::{finite_diff_check_many, Tape, Tensor, Var};
use nodekd::data::NormStats;
use nodekd::models::{
    decode, encode, evaluate, load_student, save_checkpoint, Activation, ArchKind, Classifier,
    Model, SolverSpec, StudentNet, StudentSpec, TeacherNet, TeacherSpec,
};
use nodekd::rng;
use nodekd::{Error, Result};
use rand::Rng;

fn teacher_spec(kind: ArchKind, input: [usize; 3]) -> TeacherSpec {
    TeacherSpec {
        input,
        classes: 3,
        width: 8,
        blocks: 2,
        kind,
        activation: Activation::Relu,
    }
}

fn student_spec(kind: ArchKind, input: [usize; 3], solver: SolverSpec) -> StudentSpec {
    StudentSpec {
        input,
        classes: 3,
        width: 4,
        kind,
        activation: Activation::Tanh,
        t1: 1.0,
        time_scale: 1.0,
        solver,
    }
}

fn random_images(n: usize, shape: [usize; 3], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "images", 0);
    let len = n * shape.iter().product::<usize>();
    Tensor::from_vec(
        &[n, shape[0], shape[1], shape[2]],
        (0..len).map(|_| r.gen::<f64>()).collect(),
    )
}

fn logits_of(model: &dyn Classifier, x: &Tensor) -> (Tensor, usize) {
    let mut tape = Tape::no_grad();
    let p = model.params().on_tape(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = model.forward(&mut tape, &p, xv).unwrap();
    (tape.value(out.logits).clone(), out.nfe)
}

fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let mut onehot = Tensor::zeros(&shape);
    for (i, &l) in labels.iter().enumerate() {
        onehot.data_mut()[i * shape[1] + l] = 1.0;
    }
    let ls = tape.log_softmax(logits)?;
    let oh = tape.constant(onehot);
    let picked = tape.mul(ls, oh)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0 / labels.len() as f64)
}

#[test]
fn logits_have_batch_by_class_shape() {
    let stats = NormStats::identity(1);
    for kind in [ArchKind::Dense, ArchKind::Conv] {
        let mut r = rng::stream(0, "init", 0);
        let t = TeacherNet::new(teacher_spec(kind, [1, 6, 6]), &stats, &mut r).unwrap();
        let s = StudentNet::new(
            student_spec(kind, [1, 6, 6], SolverSpec::default()),
            &stats,
            &mut r,
        )
        .unwrap();
        let x = random_images(4, [1, 6, 6], 1);
        assert_eq!(logits_of(&t, &x).0.shape(), &[4, 3]);
        let (l, nfe) = logits_of(&s, &x);
        assert_eq!(l.shape(), &[4, 3]);
        assert!(nfe > 0);
    }
}

#[test]
fn wrong_input_shape_is_rejected() {
    let stats = NormStats::identity(1);
    let t = TeacherNet::new(
        teacher_spec(ArchKind::Dense, [1, 1, 2]),
        &stats,
        &mut rng::stream(0, "init", 0),
    )
    .unwrap();
    let mut tape = Tape::no_grad();
    let p = t.params().on_tape(&mut tape, false);
    let x = tape.constant(Tensor::zeros(&[2, 1, 1, 3]));
    assert!(matches!(t.forward(&mut tape, &p, x), Err(Error::Shape { .. })));
}

#[test]
fn teacher_with_zeroed_blocks_is_stem_plus_head() {
    let stats = NormStats::identity(2);
    for kind in [ArchKind::Dense, ArchKind::Conv] {
        let mut spec = teacher_spec(kind, [2, 4, 4]);
        let mut deep = TeacherNet::new(spec.clone(), &stats, &mut rng::stream(3, "init", 0)).unwrap();
        deep.zero_residual_branches();
        spec.blocks = 0;
        let mut shallow = TeacherNet::build(spec).unwrap();
        // copy the shared stem/head parameters by name
        for p in shallow.params().clone().iter() {
            let i = shallow.params().index_of(&p.name).unwrap();
            *shallow.params_mut().value_mut(i) = deep.params().by_name(&p.name).unwrap().value.clone();
        }
        let x = random_images(5, [2, 4, 4], 9);
        let a = logits_of(&deep, &x).0;
        let b = logits_of(&shallow, &x).0;
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12, "{kind}: {u} vs {v}");
        }
    }
}

/// Dense teacher evaluated with plain loops over the parameter values.
fn dense_teacher_oracle(t: &TeacherNet, x: &[f64]) -> Vec<f64> {
    let ps = t.params();
    let val = |n: &str| ps.by_name(n).unwrap().value.clone();
    let affine = |h: &[f64], name: &str| -> Vec<f64> {
        let (w, b) = (val(&format!("{name}.weight")), val(&format!("{name}.bias")));
        let (inp, out) = (w.shape()[0], w.shape()[1]);
        (0..out)
            .map(|j| b.data()[j] + (0..inp).map(|i| h[i] * w.data()[i * out + j]).sum::<f64>())
            .collect()
    };
    let relu = |v: Vec<f64>| v.into_iter().map(|a| a.max(0.0)).collect::<Vec<_>>();
    let (sc, sh) = (val("input.scale").data()[0], val("input.shift").data()[0]);
    let z: Vec<f64> = x.iter().map(|v| v * sc + sh).collect();
    let mut y = relu(affine(&z, "stem"));
    for b in 0..t.spec().blocks {
        let h = relu(affine(&y, &format!("blocks.{b}.fc1")));
        let r = affine(&h, &format!("blocks.{b}.fc2"));
        y = y.iter().zip(r).map(|(a, c)| a + c).collect();
    }
    affine(&y, "head")
}

#[test]
fn dense_teacher_matches_loop_oracle() {
    let stats = NormStats {
        mean: vec![0.5],
        std: vec![0.25],
    };
    let mut t = TeacherNet::new(
        teacher_spec(ArchKind::Dense, [1, 1, 2]),
        &stats,
        &mut rng::stream(7, "init", 0),
    )
    .unwrap();
    // residual branches start at zero; randomize so every block contributes
    let mut r = rng::stream(7, "perturb", 0);
    for i in 0..t.params().len() {
        if t.params().get(i).trainable() {
            for v in t.params_mut().value_mut(i).data_mut() {
                *v = r.gen_range(-0.5..0.5);
            }
        }
    }
    let x = Tensor::from_vec(&[2, 1, 1, 2], vec![0.1, 0.9, 0.6, 0.3]);
    let got = logits_of(&t, &x).0;
    for n in 0..2 {
        let want = dense_teacher_oracle(&t, &x.data()[2 * n..2 * n + 2]);
        for (g, w) in got.data()[3 * n..3 * n + 3].iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }
}

#[test]
fn zero_dynamics_logits_do_not_depend_on_horizon() {
    let stats = NormStats::identity(1);
    for kind in [ArchKind::Dense, ArchKind::Conv] {
        let mut s = StudentNet::new(
            student_spec(kind, [1, 4, 4], SolverSpec::default()),
            &stats,
            &mut rng::stream(5, "init", 0),
        )
        .unwrap();
        s.zero_dynamics();
        let x = random_images(3, [1, 4, 4], 2);
        let base = logits_of(&s.with_horizon(1.0, 1.0).unwrap(), &x).0;
        for t1 in [0.5, 5.0, 100.0] {
            let l = logits_of(&s.with_horizon(t1, 1.0).unwrap(), &x).0;
            assert_eq!(l, base, "{kind} t1={t1}");
        }
    }
}

#[test]
fn rescaled_dynamics_match_long_horizon() {
    let stats = NormStats::identity(1);
    for seed in 0..3 {
        let s = StudentNet::new(
            student_spec(ArchKind::Dense, [1, 1, 2], SolverSpec::default()),
            &stats,
            &mut rng::stream(seed, "init", 0),
        )
        .unwrap();
        let x = random_images(8, [1, 1, 2], seed + 100);
        let long = logits_of(&s.with_horizon(100.0, 1.0).unwrap(), &x).0;
        let short = logits_of(&s.with_horizon(1.0, 100.0).unwrap(), &x).0;
        for (a, b) in long.data().iter().zip(short.data()) {
            assert!((a - b).abs() < 1e-2, "{a} vs {b}");
        }
    }
}

#[test]
fn student_gradients_match_finite_differences() {
    let stats = NormStats::identity(2);
    let s = StudentNet::new(
        student_spec(ArchKind::Conv, [2, 4, 4], SolverSpec::Rk4 { steps: 2 }),
        &stats,
        &mut rng::stream(11, "init", 0),
    )
    .unwrap();
    let x = random_images(2, [2, 4, 4], 12);
    let labels = [0, 2];
    let check = finite_diff_check_many(
        |tape, vars| {
            let xv = tape.constant(x.clone());
            let out = s.forward(tape, vars, xv)?;
            cross_entropy(tape, out.logits, &labels)
        },
        &s.params().values(),
        1e-3,
    )
    .unwrap();
    assert!(check.passed, "{check:?}");
}

#[test]
fn longer_horizon_needs_at_least_as_many_evaluations() {
    let stats = NormStats::identity(1);
    for seed in 0..10 {
        let s = StudentNet::new(
            student_spec(ArchKind::Dense, [1, 1, 2], SolverSpec::default()),
            &stats,
            &mut rng::stream(seed, "init", 0),
        )
        .unwrap();
        let x = random_images(16, [1, 1, 2], seed);
        let short = evaluate(&s.with_horizon(1.0, 1.0).unwrap(), &x).unwrap();
        let long = evaluate(&s.with_horizon(100.0, 1.0).unwrap(), &x).unwrap();
        assert!(long.mean_nfe >= short.mean_nfe, "seed {seed}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let stats = NormStats {
        mean: vec![0.3],
        std: vec![0.2],
    };
    let s = StudentNet::new(
        student_spec(ArchKind::Conv, [1, 4, 4], SolverSpec::Rk4 { steps: 3 }),
        &stats,
        &mut rng::stream(1, "init", 0),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.nodk");
    let extra = vec![("train.seed".to_string(), "1".to_string())];
    save_checkpoint(&Model::Student(s.clone()), &extra, &path).unwrap();
    let (back, meta) = load_student(&path).unwrap();
    assert_eq!(back.spec(), s.spec());
    assert_eq!(meta["train.seed"], "1");
    for (a, b) in s.params().iter().zip(back.params().iter()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
}

#[test]
fn checkpoint_errors_are_distinct() {
    let stats = NormStats::identity(1);
    let t = TeacherNet::new(
        teacher_spec(ArchKind::Dense, [1, 1, 2]),
        &stats,
        &mut rng::stream(1, "init", 0),
    )
    .unwrap();
    let bytes = encode(&Model::Teacher(t), &[]);

    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode(&bytes[..cut]), Err(Error::CheckpointCorrupt(_))), "cut {cut}");
    }

    let mut v2 = bytes.clone();
    v2[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(
        decode(&v2),
        Err(Error::CheckpointVersion { found: 2, expected: 1 })
    ));

    // claim a wider network than the stored tensors
    let key = b"arch.width=8";
    let at = bytes.windows(key.len()).position(|w| w == key).unwrap();
    let mut wide = bytes.clone();
    wide[at + key.len() - 1] = b'9';
    assert!(matches!(decode(&wide), Err(Error::CheckpointShape { .. })));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.nodk");
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_student(&path), Err(Error::CheckpointKind { .. })));
}
