//! Dormand–Prince 5(4) with an embedded error estimate and FSAL.

use super::config::{scaled_error_norm, step_size_update, SolverConfig};
use super::fixed::eval_stage;
use super::{AcceptedStep, Dynamics, OdeSolution};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];

const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
    ],
    // Seventh row equals the fifth-order weights (FSAL).
    &[
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];

/// Fifth-order weights minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

pub struct Dopri5Step {
    pub y5: Var,
    /// `y5 - y4`, on plain values.
    pub error: Tensor,
    pub k1: Var,
    pub k7: Var,
    /// Dynamics evaluations spent in this call.
    pub nfe: usize,
}

/// One Dormand–Prince step of size `h` from `(t, y)`. When `k1` is given it
/// must be `f(t, y)` (typically the previous step's `k7`).
pub fn dopri5_step(
    tape: &mut Tape,
    f: &dyn Dynamics,
    t: f64,
    y: Var,
    h: f64,
    k1: Option<Var>,
) -> Result<Dopri5Step> {
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step size must be positive, got {h}")));
    }
    let mut nfe = 0;
    let k1 = match k1 {
        Some(k) => k,
        None => {
            nfe += 1;
            eval_stage(tape, f, t, y, h)?
        }
    };
    let mut k = Vec::with_capacity(7);
    k.push(k1);
    let mut y5 = y;
    for stage in 1..7 {
        let mut terms = Vec::with_capacity(stage + 1);
        terms.push((1.0, y));
        terms.extend(A[stage].iter().zip(&k).map(|(&a, &kv)| (h * a, kv)));
        let ys = tape.lincomb(&terms)?;
        if stage == 6 {
            y5 = ys;
        }
        k.push(eval_stage(tape, f, t + C[stage] * h, ys, h)?);
        nfe += 1;
    }
    let mut error = vec![0.0; tape.value(y).numel()];
    for (&e, &kv) in E.iter().zip(&k) {
        if e == 0.0 {
            continue;
        }
        for (o, v) in error.iter_mut().zip(tape.value(kv).data()) {
            *o += h * e * v;
        }
    }
    let error = Tensor::from_vec(tape.shape(y), error);
    Ok(Dopri5Step {
        y5,
        error,
        k1,
        k7: k[6],
        nfe,
    })
}

/// Adaptive integration over `[t0, t1]`, landing exactly on `t1`.
pub fn dopri5_integrate(
    tape: &mut Tape,
    f: &dyn Dynamics,
    y0: Var,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<(Var, OdeSolution)> {
    if !(t1 > t0) {
        return Err(Error::Contract(format!("integration needs t1 > t0, got [{t0}, {t1}]")));
    }
    cfg.validate()?;
    let discard = !tape.grad_enabled();
    let base = tape.mark();

    let mut t = t0;
    let mut y = y0;
    let mut h = cfg.h_init;
    let mut k1: Option<Var> = None;
    let mut steps = Vec::new();
    let mut nfe = 0;
    let mut rejected = 0;

    loop {
        if steps.len() + rejected >= cfg.max_steps {
            return Err(Error::Divergence {
                steps: steps.len(),
                rejected,
                t,
                h,
                reason: "max_steps exceeded",
            });
        }
        let remaining = t1 - t;
        let last = h >= remaining * (1.0 - 1e-12);
        let h_try = if last { remaining } else { h };

        let before_k1 = tape.mark();
        if k1.is_none() || !cfg.fsal {
            nfe += 1;
            k1 = Some(eval_stage(tape, f, t, y, h_try)?);
        }
        let attempt = if cfg.fsal { tape.mark() } else { before_k1 };
        let step = dopri5_step(tape, f, t, y, h_try, k1)?;
        nfe += step.nfe;
        let err = scaled_error_norm(
            step.error.data(),
            tape.value(y).data(),
            tape.value(step.y5).data(),
            cfg,
        );
        let (accept, h_next) = step_size_update(h_try, err, cfg);

        if !accept {
            tape.truncate(attempt);
            rejected += 1;
            if h_try <= cfg.h_min {
                return Err(Error::Divergence {
                    steps: steps.len(),
                    rejected,
                    t,
                    h: h_try,
                    reason: "step size underflow",
                });
            }
            h = h_next;
            continue;
        }

        debug_assert!(err <= 1.0);
        steps.push(AcceptedStep { t, h: h_try, error: err });
        t = if last { t1 } else { t + h_try };
        y = step.y5;
        k1 = cfg.fsal.then_some(step.k7);
        if discard {
            let yv = tape.value(y).clone();
            let kv = k1.map(|k| tape.value(k).clone());
            tape.truncate(base);
            y = tape.constant(yv);
            k1 = kv.map(|k| tape.constant(k));
        }
        if last {
            break;
        }
        h = h_next;
    }

    let sol = OdeSolution {
        y_final: tape.value(y).clone(),
        steps,
        nfe,
        rejected,
    };
    Ok((y, sol))
}

/// [`dopri5_integrate`] on plain values.
pub fn dopri5_solve(
    f: &dyn Dynamics,
    y0: &Tensor,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<OdeSolution> {
    let mut tape = Tape::no_grad();
    let y = tape.constant(y0.clone());
    Ok(dopri5_integrate(&mut tape, f, y, t0, t1, cfg)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tableau_rows_are_consistent() {
        for (i, row) in A.iter().enumerate() {
            let s: f64 = row.iter().sum();
            assert!((s - C[i]).abs() < 1e-14, "row {i}");
        }
        // embedded weights sum to one as well, so the difference sums to zero
        assert!(E.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn zero_dynamics_step_is_exact() {
        let f = |tape: &mut Tape, _t: f64, y: Var| tape.scale(y, 0.0);
        let mut tape = Tape::new();
        let y = tape.leaf(Tensor::from_vec(&[2], vec![3.0, -1.0]));
        let s = dopri5_step(&mut tape, &f, 0.0, y, 0.7, None).unwrap();
        assert_eq!(tape.value(s.y5).data(), &[3.0, -1.0]);
        assert_eq!(s.error.max_abs(), 0.0);
        assert_eq!(s.nfe, 7);
    }

    #[test]
    fn constant_dynamics_step_is_exact() {
        let f = |tape: &mut Tape, _t: f64, y: Var| {
            let z = tape.scale(y, 0.0)?;
            tape.add_scalar(z, 1.0)
        };
        let mut tape = Tape::new();
        let y = tape.leaf(Tensor::scalar(2.0));
        let s = dopri5_step(&mut tape, &f, 0.0, y, 0.25, None).unwrap();
        assert!((tape.value(s.y5).item() - 2.25).abs() < 1e-15);
        assert!(s.error.max_abs() < 1e-16);
    }

    #[test]
    fn rejected_attempts_leave_no_nodes_behind() {
        let f = |tape: &mut Tape, _t: f64, y: Var| tape.scale(y, -50.0);
        let mut cfg = SolverConfig::for_horizon(0.0, 1.0);
        cfg.h_init = 0.5;
        let mut tape = Tape::new();
        let y = tape.leaf(Tensor::scalar(1.0));
        let (_, sol) = dopri5_integrate(&mut tape, &f, y, 0.0, 1.0, &cfg).unwrap();
        assert!(sol.rejected > 0);
        // per accepted step: 6 lincombs + 6 stage evals (1 node each)
        let expected = 1 + 1 + sol.steps.len() * 12;
        assert_eq!(tape.len(), expected);
    }

    #[test]
    fn max_steps_is_a_divergence_error() {
        let f = |tape: &mut Tape, _t: f64, y: Var| tape.scale(y, -1.0);
        let mut cfg = SolverConfig::with_tolerance(0.0, 1.0, 1e-10, 1e-10);
        cfg.max_steps = 3;
        let err = dopri5_solve(&f, &Tensor::scalar(1.0), 0.0, 1.0, &cfg).unwrap_err();
        assert!(matches!(err, Error::Divergence { reason: "max_steps exceeded", .. }));
    }
}
