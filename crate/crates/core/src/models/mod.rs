//! Residual teachers, Neural ODE students, and their checkpoints.

mod checkpoint;
mod layers;
mod params;
mod student;
mod teacher;

pub use checkpoint::{
    decode, encode, load_checkpoint, load_student, load_teacher, save_checkpoint, MAGIC, VERSION,
};
pub use layers::{Activation, ArchKind};
pub use params::{init_he, Param, Params, Role};
pub use student::{SolverSpec, StudentNet, StudentSpec, DYNAMICS_DEPTH};
pub use teacher::{teacher_preset_blocks, TeacherNet, TeacherSpec, TEACHER_PRESETS};

use std::collections::BTreeMap;
use std::str::FromStr;

use rayon::prelude::*;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Samples per forward pass during evaluation. Fixed because the adaptive
/// solver shares one step sequence per batch, so results depend on it.
pub const EVAL_CHUNK: usize = 256;

pub struct Forward {
    pub logits: Var,
    /// Dynamics evaluations spent (zero for discrete networks).
    pub nfe: usize,
}

pub trait Classifier: Send + Sync {
    fn params(&self) -> &Params;
    fn params_mut(&mut self) -> &mut Params;
    fn classes(&self) -> usize;
    fn input_shape(&self) -> [usize; 3];

    /// Logits `(n, classes)` for images `x: (n, c, h, w)`, with `p` the
    /// parameters as recorded by [`Params::on_tape`].
    fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Forward>;

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1..] != self.input_shape() {
            return Err(Error::shape("model input", &[s, &self.input_shape()]));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Model {
    Teacher(TeacherNet),
    Student(StudentNet),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Teacher(_) => "teacher",
            Model::Student(_) => "student",
        }
    }

    pub fn arch_meta(&self) -> Vec<(String, String)> {
        match self {
            Model::Teacher(t) => t.spec().to_meta(),
            Model::Student(s) => s.spec().to_meta(),
        }
    }

    pub fn as_classifier(&self) -> &dyn Classifier {
        match self {
            Model::Teacher(t) => t,
            Model::Student(s) => s,
        }
    }
}

impl Classifier for Model {
    fn params(&self) -> &Params {
        self.as_classifier().params()
    }

    fn params_mut(&mut self) -> &mut Params {
        match self {
            Model::Teacher(t) => t.params_mut(),
            Model::Student(s) => s.params_mut(),
        }
    }

    fn classes(&self) -> usize {
        self.as_classifier().classes()
    }

    fn input_shape(&self) -> [usize; 3] {
        self.as_classifier().input_shape()
    }

    fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Forward> {
        self.as_classifier().forward(tape, p, x)
    }
}

/// Output of a gradient-free pass over a whole image set.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub logits: Tensor,
    /// Dynamics evaluations per forward pass, averaged over samples.
    pub mean_nfe: f64,
}

/// Forward pass without gradients over `images`, in parallel chunks of
/// [`EVAL_CHUNK`] samples.
pub fn evaluate(model: &dyn Classifier, images: &Tensor) -> Result<Evaluation> {
    let n = images.batch();
    let chunks: Vec<Vec<usize>> = (0..n)
        .collect::<Vec<_>>()
        .chunks(EVAL_CHUNK)
        .map(|c| c.to_vec())
        .collect();
    let parts: Vec<Result<(Tensor, usize)>> = chunks
        .par_iter()
        .map(|idx| {
            let mut tape = Tape::no_grad();
            let p = model.params().on_tape(&mut tape, false);
            let x = tape.constant(images.select_rows(idx));
            let out = model.forward(&mut tape, &p, x)?;
            Ok((tape.value(out.logits).clone(), out.nfe))
        })
        .collect();
    let k = model.classes();
    let mut data = Vec::with_capacity(n * k);
    let mut nfe = 0.0;
    for (part, idx) in parts.into_iter().zip(&chunks) {
        let (logits, f) = part?;
        data.extend_from_slice(logits.data());
        nfe += (f * idx.len()) as f64;
    }
    Ok(Evaluation {
        logits: Tensor::from_vec(&[n, k], data),
        mean_nfe: if n == 0 { 0.0 } else { nfe / n as f64 },
    })
}

pub fn predict(model: &dyn Classifier, images: &Tensor) -> Result<Vec<usize>> {
    Ok(evaluate(model, images)?.logits.argmax_rows())
}

pub fn accuracy(model: &dyn Classifier, images: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(accuracy_of(&predict(model, images)?, labels))
}

pub fn accuracy_of(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

pub(crate) fn shape_string(s: &[usize; 3]) -> String {
    format!("{}x{}x{}", s[0], s[1], s[2])
}

/// Parses `CxHxW`.
pub fn parse_shape(s: &str) -> Result<[usize; 3]> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad shape {s:?} (expected CxHxW)")))?;
    match dims.as_slice() {
        &[c, h, w] if c > 0 && h > 0 && w > 0 => Ok([c, h, w]),
        _ => Err(Error::Config(format!("bad shape {s:?} (expected CxHxW)"))),
    }
}

pub(crate) fn meta_get<'a>(meta: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::CheckpointCorrupt(format!("missing metadata key {key}")))
}

pub(crate) fn meta_parse<T: FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let v = meta_get(meta, key)?;
    v.parse()
        .map_err(|_| Error::CheckpointCorrupt(format!("bad value {v:?} for {key}")))
}
