//! Fixed-step and adaptive (Dormand–Prince 5(4)) integrators that run on the
//! autodiff tape, so gradients flow through every recorded stage.

mod config;
mod dopri5;
mod fixed;

pub use config::{scaled_error_norm, step_size_update, SolverConfig, DEFAULT_TOL};
pub use dopri5::{dopri5_integrate, dopri5_solve, dopri5_step, Dopri5Step};
pub use fixed::{euler_integrate, euler_step, rk4_integrate, rk4_solve};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

/// Right-hand side `dy/dt = f(t, y)`. Parameters are captured by the
/// implementor as tape variables.
pub trait Dynamics {
    fn eval(&self, tape: &mut Tape, t: f64, y: Var) -> Result<Var>;
}

impl<F> Dynamics for F
where
    F: Fn(&mut Tape, f64, Var) -> Result<Var>,
{
    fn eval(&self, tape: &mut Tape, t: f64, y: Var) -> Result<Var> {
        self(tape, t, y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AcceptedStep {
    /// Start time of the step.
    pub t: f64,
    pub h: f64,
    /// Scaled error norm (zero for fixed-step methods).
    pub error: f64,
}

#[derive(Clone, Debug)]
pub struct OdeSolution {
    pub y_final: Tensor,
    pub steps: Vec<AcceptedStep>,
    /// Number of dynamics evaluations.
    pub nfe: usize,
    pub rejected: usize,
}

/// How to integrate: a fixed number of uniform steps, or adaptively.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Integrator {
    Euler { steps: usize },
    Rk4 { steps: usize },
    Dopri5(SolverConfig),
}

/// Integrates `f` from `y0` over `[t0, t1]` on `tape`. The returned variable
/// is differentiable with respect to `y0` and anything `f` closes over;
/// step sizes chosen by the adaptive controller are constants of the
/// reverse pass.
pub fn integrate_with_grad(
    tape: &mut Tape,
    f: &dyn Dynamics,
    y0: Var,
    t0: f64,
    t1: f64,
    method: &Integrator,
) -> Result<(Var, OdeSolution)> {
    match method {
        Integrator::Euler { steps } => euler_integrate(tape, f, y0, t0, t1, *steps),
        Integrator::Rk4 { steps } => rk4_integrate(tape, f, y0, t0, t1, *steps),
        Integrator::Dopri5(cfg) => dopri5_integrate(tape, f, y0, t0, t1, cfg),
    }
}

/// Wraps `f` on `[0, scale * T]` as `scale * f(scale * t, y)` on `[0, T]`.
pub struct TimeScaled<'a> {
    pub inner: &'a dyn Dynamics,
    pub scale: f64,
}

impl Dynamics for TimeScaled<'_> {
    fn eval(&self, tape: &mut Tape, t: f64, y: Var) -> Result<Var> {
        let dy = self.inner.eval(tape, self.scale * t, y)?;
        tape.scale(dy, self.scale)
    }
}

pub(crate) fn check_finite(tape: &Tape, v: Var, t: f64, h: f64) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(crate::Error::SolverFault { t, h })
    }
}
