use super::{AcceptedStep, Dynamics, OdeSolution};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub(super) fn eval_stage(
    tape: &mut Tape,
    f: &dyn Dynamics,
    t: f64,
    y: Var,
    h: f64,
) -> Result<Var> {
    let dy = f.eval(tape, t, y).map_err(|e| match e {
        Error::NumericFault { .. } => Error::SolverFault { t, h },
        other => other,
    })?;
    if tape.shape(dy) != tape.shape(y) {
        return Err(Error::shape("dynamics", &[tape.shape(y), tape.shape(dy)]));
    }
    super::check_finite(tape, dy, t, h)?;
    Ok(dy)
}

fn check_span(t0: f64, t1: f64, n_steps: usize) -> Result<f64> {
    if !(t1 > t0) || n_steps == 0 {
        return Err(Error::Contract(format!(
            "fixed-step integration needs t1 > t0 and at least one step (got [{t0}, {t1}], {n_steps} steps)"
        )));
    }
    Ok((t1 - t0) / n_steps as f64)
}

/// `y + h f(t, y)`
pub fn euler_step(tape: &mut Tape, f: &dyn Dynamics, t: f64, y: Var, h: f64) -> Result<Var> {
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step size must be positive, got {h}")));
    }
    let k = eval_stage(tape, f, t, y, h)?;
    tape.lincomb(&[(1.0, y), (h, k)])
}

pub fn euler_integrate(
    tape: &mut Tape,
    f: &dyn Dynamics,
    y0: Var,
    t0: f64,
    t1: f64,
    n_steps: usize,
) -> Result<(Var, OdeSolution)> {
    let h = check_span(t0, t1, n_steps)?;
    let mut y = y0;
    let mut steps = Vec::with_capacity(n_steps);
    for i in 0..n_steps {
        let t = t0 + i as f64 * h;
        y = euler_step(tape, f, t, y, h)?;
        steps.push(AcceptedStep { t, h, error: 0.0 });
    }
    let sol = OdeSolution {
        y_final: tape.value(y).clone(),
        steps,
        nfe: n_steps,
        rejected: 0,
    };
    Ok((y, sol))
}

/// Classical fourth-order Runge–Kutta with uniform steps.
pub fn rk4_integrate(
    tape: &mut Tape,
    f: &dyn Dynamics,
    y0: Var,
    t0: f64,
    t1: f64,
    n_steps: usize,
) -> Result<(Var, OdeSolution)> {
    let h = check_span(t0, t1, n_steps)?;
    let mut y = y0;
    let mut steps = Vec::with_capacity(n_steps);
    for i in 0..n_steps {
        let t = t0 + i as f64 * h;
        let k1 = eval_stage(tape, f, t, y, h)?;
        let y2 = tape.lincomb(&[(1.0, y), (h / 2.0, k1)])?;
        let k2 = eval_stage(tape, f, t + h / 2.0, y2, h)?;
        let y3 = tape.lincomb(&[(1.0, y), (h / 2.0, k2)])?;
        let k3 = eval_stage(tape, f, t + h / 2.0, y3, h)?;
        let y4 = tape.lincomb(&[(1.0, y), (h, k3)])?;
        let k4 = eval_stage(tape, f, t + h, y4, h)?;
        y = tape.lincomb(&[
            (1.0, y),
            (h / 6.0, k1),
            (h / 3.0, k2),
            (h / 3.0, k3),
            (h / 6.0, k4),
        ])?;
        steps.push(AcceptedStep { t, h, error: 0.0 });
    }
    let sol = OdeSolution {
        y_final: tape.value(y).clone(),
        steps,
        nfe: 4 * n_steps,
        rejected: 0,
    };
    Ok((y, sol))
}

/// [`rk4_integrate`] on plain values.
pub fn rk4_solve(f: &dyn Dynamics, y0: &Tensor, t0: f64, t1: f64, n_steps: usize) -> Result<OdeSolution> {
    let mut tape = Tape::no_grad();
    let y = tape.constant(y0.clone());
    Ok(rk4_integrate(&mut tape, f, y, t0, t1, n_steps)?.1)
}
