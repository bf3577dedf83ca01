use crate::autodiff::{log_softmax_rows, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `softmax(logits / T)` row by row.
pub fn soft_targets(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    if logits.rank() != 2 {
        return Err(Error::shape("soft_targets", &[logits.shape()]));
    }
    Ok(log_softmax_rows(&logits.map(|v| v / temperature)).map(f64::exp))
}

/// Differentiable `softmax(logits / T)` on the tape.
pub fn soft_targets_var(tape: &mut Tape, logits: Var, temperature: f64) -> Result<Var> {
    let ls = log_softmax_t(tape, logits, temperature)?;
    tape.exp(ls)
}

fn log_softmax_t(tape: &mut Tape, logits: Var, temperature: f64) -> Result<Var> {
    check_temperature(temperature)?;
    let z = if temperature == 1.0 {
        logits
    } else {
        tape.scale(logits, 1.0 / temperature)?
    };
    tape.log_softmax(z)
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Contract(format!("temperature must be positive, got {t}")))
    }
}

fn one_hot(labels: &[usize], shape: &[usize]) -> Result<Tensor> {
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("cross_entropy", &[shape, &[labels.len()]]));
    }
    let k = shape[1];
    let mut t = Tensor::zeros(shape);
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Contract(format!("label {l} out of range for {k} classes")));
        }
        t.data_mut()[i * k + l] = 1.0;
    }
    Ok(t)
}

/// Batch-mean cross-entropy of `softmax(logits)` against hard labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let oh = one_hot(labels, tape.shape(logits))?;
    let ls = tape.log_softmax(logits)?;
    let oh = tape.constant(oh);
    let picked = tape.mul(ls, oh)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0 / labels.len() as f64)
}

/// Batch-mean `KL(teacher || student)` with both sides softened by `T`.
/// The teacher distribution is a constant.
pub fn kd_loss(tape: &mut Tape, student_logits: Var, teacher_soft: &Tensor, temperature: f64) -> Result<Var> {
    let shape = tape.shape(student_logits).to_vec();
    if teacher_soft.shape() != shape.as_slice() {
        return Err(Error::shape("kd_loss", &[&shape, teacher_soft.shape()]));
    }
    let n = shape[0] as f64;
    // sum p log p with 0 log 0 = 0
    let neg_entropy: f64 = teacher_soft
        .data()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum();
    let log_s = log_softmax_t(tape, student_logits, temperature)?;
    let pr = tape.constant(teacher_soft.clone());
    let cross = tape.mul(pr, log_s)?;
    let cross = tape.sum(cross)?;
    // sum p log p - sum p log s
    let kl = tape.scale(cross, -1.0)?;
    let kl = tape.add_scalar(kl, neg_entropy)?;
    tape.scale(kl, 1.0 / n)
}

/// Value of each term of the distillation objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub sl: f64,
    pub kd: f64,
    pub total: f64,
}

/// `(1 - λ) CE + λ T² KD`. A zero weight drops its term from the graph
/// entirely, so `λ = 0` is exactly cross-entropy and `λ = 1` is exactly
/// `T² KD`; with `λ = 0` no teacher is needed.
pub fn combined_loss(
    tape: &mut Tape,
    student_logits: Var,
    teacher_soft: Option<&Tensor>,
    labels: &[usize],
    temperature: f64,
    lambda: f64,
) -> Result<(Var, LossParts)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Contract(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    check_temperature(temperature)?;
    let mut parts = LossParts::default();
    let mut terms = Vec::with_capacity(2);
    if lambda < 1.0 {
        let ce = cross_entropy(tape, student_logits, labels)?;
        parts.sl = tape.value(ce).item();
        terms.push((1.0 - lambda, ce));
    }
    if lambda > 0.0 {
        let soft = teacher_soft
            .ok_or_else(|| Error::Contract("distillation with lambda > 0 needs teacher soft targets".into()))?;
        if labels.len() != soft.batch() {
            return Err(Error::shape("combined_loss", &[&[labels.len()], soft.shape()]));
        }
        let kd = kd_loss(tape, student_logits, soft, temperature)?;
        parts.kd = tape.value(kd).item();
        terms.push((lambda * temperature * temperature, kd));
    }
    let total = match terms.as_slice() {
        [(w, v)] if *w == 1.0 => *v,
        _ => tape.lincomb(&terms)?,
    };
    parts.total = tape.value(total).item();
    Ok((total, parts))
}

/// Weights `(1 - λ, λ T²)` applied to the supervised and distillation terms.
pub fn loss_weights(temperature: f64, lambda: f64) -> (f64, f64) {
    (1.0 - lambda, lambda * temperature * temperature)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_targets_examples() {
        let l = Tensor::from_vec(&[1, 3], vec![2.0, 1.0, 0.0]);
        let s1 = soft_targets(&l, 1.0).unwrap();
        for (a, b) in s1.data().iter().zip([0.66524, 0.24473, 0.09003]) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        let s2 = soft_targets(&l, 2.0).unwrap();
        for (a, b) in s2.data().iter().zip([0.50648, 0.30719, 0.18632]) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        let u = soft_targets(&Tensor::zeros(&[1, 3]), 7.0).unwrap();
        assert!(u.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(soft_targets(&l, 0.0).is_err());
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let l = Tensor::from_vec(&[1, 2], vec![1000.0, 0.0]);
        let s = soft_targets(&l, 1.0).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
    }

    #[test]
    fn kd_of_point_mass_against_uniform_is_ln2() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(&[1, 2]));
        let kd = kd_loss(&mut tape, l, &Tensor::from_vec(&[1, 2], vec![1.0, 0.0]), 1.0).unwrap();
        assert!((tape.value(kd).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_weights_at_default_settings() {
        let (a, b) = loss_weights(10.0, 0.9);
        assert!((a - 0.1).abs() < 1e-15);
        assert!((b - 90.0).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(&[1, 2]));
        assert!(matches!(cross_entropy(&mut tape, l, &[2]), Err(Error::Contract(_))));
    }
}
