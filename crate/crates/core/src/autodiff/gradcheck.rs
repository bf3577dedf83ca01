//! Central-difference gradient checker used as the test oracle for every
//! reverse rule in the crate.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Perturbation used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared absolutely rather than
/// relatively.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub passed: bool,
    pub max_rel_error: f64,
    /// `(input index, component)` of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Checks the tape gradient of scalar `f` at `x` against central differences.
pub fn finite_diff_check<F>(f: F, x: &Tensor, rel_tol: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), rel_tol)
}

/// As [`finite_diff_check`] over several input tensors at once (e.g. every
/// parameter of a network).
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], rel_tol: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = vals.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheck {
        passed: true,
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v);
        for ci in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[ti].data_mut()[ci] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[ti].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.data()[ci];
            let err = relative_error(a, numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ti, ci);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= rel_tol;
    Ok(report)
}
