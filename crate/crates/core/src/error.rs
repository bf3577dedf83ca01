use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    #[error("non-finite value produced by {op}")]
    NumericFault { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite solver stage at t={t}, h={h}")]
    SolverFault { t: f64, h: f64 },

    #[error("solver diverged after {steps} steps ({rejected} rejected) at t={t}, h={h}: {reason}")]
    Divergence {
        steps: usize,
        rejected: usize,
        t: f64,
        h: f64,
        reason: &'static str,
    },

    #[error("training diverged at epoch {epoch}: {reason}")]
    TrainingDiverged { epoch: usize, reason: String },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),

    #[error("checkpoint shape table mismatch for {name}: file has {found:?}, architecture expects {expected:?}")]
    CheckpointShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("checkpoint holds a {found} model, expected {expected}")]
    CheckpointKind { found: String, expected: String },

    #[error("bad IDX magic {found:#010x} (expected {expected:#010x})")]
    IdxMagic { found: u32, expected: u32 },

    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("parse error at row {row}: {detail}")]
    Parse { row: usize, detail: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        Error::Shape {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }

    /// True for errors that come from non-finite arithmetic or an ODE solve
    /// that failed to converge.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NumericFault { .. }
                | Error::SolverFault { .. }
                | Error::Divergence { .. }
                | Error::TrainingDiverged { .. }
        )
    }
}
