use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::layers::{Activation, ArchKind, Conv, GroupNorm, Head, InputNorm, Linear, Stem};
use super::params::{init_he, Params};
use super::{meta_get, meta_parse, parse_shape, shape_string, Classifier, Forward};
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::odeint::{integrate_with_grad, Dynamics, Integrator, SolverConfig};
use crate::rng::Rng;

/// Number of layers in the dynamics network.
pub const DYNAMICS_DEPTH: usize = 4;

/// Integration method of a student, independent of its horizon.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SolverSpec {
    Adaptive { rtol: f64, atol: f64 },
    Rk4 { steps: usize },
    Euler { steps: usize },
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec::Adaptive {
            rtol: crate::odeint::DEFAULT_TOL,
            atol: crate::odeint::DEFAULT_TOL,
        }
    }
}

impl SolverSpec {
    pub fn integrator(&self, t1: f64) -> Integrator {
        match *self {
            SolverSpec::Adaptive { rtol, atol } => {
                Integrator::Dopri5(SolverConfig::with_tolerance(0.0, t1, rtol, atol))
            }
            SolverSpec::Rk4 { steps } => Integrator::Rk4 { steps },
            SolverSpec::Euler { steps } => Integrator::Euler { steps },
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            SolverSpec::Adaptive { rtol, atol } => rtol > 0.0 && atol > 0.0,
            SolverSpec::Rk4 { steps } | SolverSpec::Euler { steps } => steps > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid solver {self}")))
        }
    }
}

/// `dopri5:<rtol>:<atol>`, `dopri5` (default tolerances), `rk4:<steps>` or
/// `euler:<steps>`.
impl fmt::Display for SolverSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolverSpec::Adaptive { rtol, atol } => write!(f, "dopri5:{rtol:e}:{atol:e}"),
            SolverSpec::Rk4 { steps } => write!(f, "rk4:{steps}"),
            SolverSpec::Euler { steps } => write!(f, "euler:{steps}"),
        }
    }
}

impl FromStr for SolverSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse solver {s:?}"));
        let parts: Vec<&str> = s.split(':').collect();
        let spec = match parts.as_slice() {
            ["dopri5"] => SolverSpec::default(),
            ["dopri5", tol] => {
                let tol = tol.parse().map_err(|_| bad())?;
                SolverSpec::Adaptive { rtol: tol, atol: tol }
            }
            ["dopri5", r, a] => SolverSpec::Adaptive {
                rtol: r.parse().map_err(|_| bad())?,
                atol: a.parse().map_err(|_| bad())?,
            },
            ["rk4", n] => SolverSpec::Rk4 {
                steps: n.parse().map_err(|_| bad())?,
            },
            ["euler", n] => SolverSpec::Euler {
                steps: n.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentSpec {
    pub input: [usize; 3],
    pub classes: usize,
    pub width: usize,
    pub kind: ArchKind,
    pub activation: Activation,
    /// End of the horizon `[0, t1]`.
    pub t1: f64,
    /// The dynamics actually integrated are `s * f(s * t, y)`; 1 unless
    /// comparing horizons by rescaling time.
    pub time_scale: f64,
    pub solver: SolverSpec,
}

impl StudentSpec {
    pub fn integrator(&self) -> Integrator {
        self.solver.integrator(self.t1)
    }

    pub fn to_meta(&self) -> Vec<(String, String)> {
        vec![
            ("arch.input".into(), shape_string(&self.input)),
            ("arch.classes".into(), self.classes.to_string()),
            ("arch.width".into(), self.width.to_string()),
            ("arch.kind".into(), self.kind.to_string()),
            ("arch.activation".into(), self.activation.to_string()),
            ("arch.t1".into(), format!("{:e}", self.t1)),
            ("arch.time_scale".into(), format!("{:e}", self.time_scale)),
            ("arch.solver".into(), self.solver.to_string()),
        ]
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        Ok(Self {
            input: parse_shape(meta_get(meta, "arch.input")?)?,
            classes: meta_parse(meta, "arch.classes")?,
            width: meta_parse(meta, "arch.width")?,
            kind: meta_get(meta, "arch.kind")?.parse()?,
            activation: meta_get(meta, "arch.activation")?.parse()?,
            t1: meta_parse(meta, "arch.t1")?,
            time_scale: meta_parse(meta, "arch.time_scale")?,
            solver: meta_get(meta, "arch.solver")?.parse()?,
        })
    }
}

#[derive(Clone, Debug)]
enum DynLayer {
    Dense(Linear),
    Conv(Conv, Option<GroupNorm>),
}

/// Neural ODE classifier: stem, `dy/dt = f(t, y)` integrated over
/// `[0, t1]`, pooled linear head.
#[derive(Clone, Debug)]
pub struct StudentNet {
    spec: StudentSpec,
    params: Params,
    input_norm: InputNorm,
    stem: Stem,
    dynamics: Vec<DynLayer>,
    head: Head,
}

impl StudentNet {
    pub fn build(spec: StudentSpec) -> Result<Self> {
        let ok = spec.classes >= 2
            && spec.width > 0
            && !spec.input.contains(&0)
            && spec.t1 > 0.0
            && spec.t1.is_finite()
            && spec.time_scale > 0.0
            && spec.time_scale.is_finite();
        if !ok {
            return Err(Error::Config(format!("invalid student spec {spec:?}")));
        }
        spec.solver.validate()?;
        let mut params = Params::new();
        let input_norm = InputNorm::new(&mut params, spec.input[0]);
        let stem = Stem::new(&mut params, spec.kind, spec.input, spec.width, 2);
        let w = spec.width;
        // every layer sees the time as one extra input channel
        let dynamics = (0..DYNAMICS_DEPTH)
            .map(|i| {
                let name = format!("dynamics.{i}");
                let last = i + 1 == DYNAMICS_DEPTH;
                match spec.kind {
                    ArchKind::Dense => DynLayer::Dense(Linear::new(&mut params, &name, w + 1, w)),
                    ArchKind::Conv => DynLayer::Conv(
                        Conv::new(&mut params, &name, w + 1, w, 3, 1),
                        (!last).then(|| GroupNorm::new(&mut params, &format!("{name}.norm"), w)),
                    ),
                }
            })
            .collect();
        let head = Head::new(&mut params, w, spec.classes);
        Ok(Self {
            spec,
            params,
            input_norm,
            stem,
            dynamics,
            head,
        })
    }

    pub fn new(spec: StudentSpec, stats: &NormStats, rng: &mut Rng) -> Result<Self> {
        let mut net = Self::build(spec)?;
        init_he(&mut net.params, rng);
        net.input_norm.set_stats(&mut net.params, stats);
        Ok(net)
    }

    pub fn spec(&self) -> &StudentSpec {
        &self.spec
    }

    /// Changes the horizon and time scaling while keeping all parameters.
    pub fn with_horizon(&self, t1: f64, time_scale: f64) -> Result<Self> {
        let mut spec = self.spec.clone();
        spec.t1 = t1;
        spec.time_scale = time_scale;
        let mut out = Self::build(spec)?;
        out.params = self.params.clone();
        Ok(out)
    }

    pub fn with_solver(&self, solver: SolverSpec) -> Result<Self> {
        solver.validate()?;
        let mut out = self.clone();
        out.spec.solver = solver;
        Ok(out)
    }

    /// Zeroes the output layer of the dynamics, making `f` identically zero.
    pub fn zero_dynamics(&mut self) {
        let idx = match self.dynamics.last().expect("dynamics has layers") {
            DynLayer::Dense(l) => [l.weight_index(), l.bias_index()],
            DynLayer::Conv(c, _) => [c.weight_index(), c.bias_index()],
        };
        for i in idx {
            self.params.value_mut(i).data_mut().fill(0.0);
        }
    }
}

struct StudentDynamics<'a> {
    net: &'a StudentNet,
    p: &'a [Var],
}

impl StudentDynamics<'_> {
    fn with_time(&self, tape: &mut Tape, t: f64, h: Var) -> Result<Var> {
        let mut shape = tape.shape(h).to_vec();
        shape[1] = 1;
        let tc = tape.constant(Tensor::full(&shape, t));
        tape.concat(&[h, tc], 1)
    }
}

impl Dynamics for StudentDynamics<'_> {
    fn eval(&self, tape: &mut Tape, t: f64, y: Var) -> Result<Var> {
        let s = self.net.spec.time_scale;
        let t = s * t;
        let act = self.net.spec.activation;
        let mut h = y;
        for (i, layer) in self.net.dynamics.iter().enumerate() {
            let last = i + 1 == self.net.dynamics.len();
            let x = self.with_time(tape, t, h)?;
            h = match layer {
                DynLayer::Dense(l) => l.forward(tape, self.p, x)?,
                DynLayer::Conv(c, gn) => {
                    let z = c.forward(tape, self.p, x)?;
                    match gn {
                        Some(gn) => gn.forward(tape, self.p, z)?,
                        None => z,
                    }
                }
            };
            if !last {
                h = act.apply(tape, h)?;
            }
        }
        if s == 1.0 {
            Ok(h)
        } else {
            tape.scale(h, s)
        }
    }
}

impl Classifier for StudentNet {
    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn classes(&self) -> usize {
        self.spec.classes
    }

    fn input_shape(&self) -> [usize; 3] {
        self.spec.input
    }

    fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Forward> {
        self.check_input(tape, x)?;
        let x = self.input_norm.forward(tape, p, x)?;
        let y0 = self.stem.forward(tape, p, x, self.spec.activation)?;
        let f = StudentDynamics { net: self, p };
        let (y1, sol) = integrate_with_grad(tape, &f, y0, 0.0, self.spec.t1, &self.spec.integrator())?;
        let logits = self.head.forward(tape, p, y1)?;
        Ok(Forward {
            logits,
            nfe: sol.nfe,
        })
    }
}
