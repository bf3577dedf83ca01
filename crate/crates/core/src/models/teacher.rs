use std::collections::BTreeMap;

use super::layers::{Activation, ArchKind, Conv, GroupNorm, Head, InputNorm, Linear, Stem};
use super::params::{init_he, Params};
use super::{meta_get, meta_parse, parse_shape, shape_string, Classifier, Forward};
use crate::autodiff::{Tape, Var};
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Residual-block counts standing in for the deep CIFAR ResNets.
pub const TEACHER_PRESETS: [(&str, usize); 3] = [("tiny-4", 4), ("small-8", 8), ("medium-14", 14)];

pub fn teacher_preset_blocks(name: &str) -> Result<usize> {
    TEACHER_PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, b)| *b)
        .ok_or_else(|| Error::Config(format!("unknown teacher preset {name:?}")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSpec {
    pub input: [usize; 3],
    pub classes: usize,
    pub width: usize,
    pub blocks: usize,
    pub kind: ArchKind,
    pub activation: Activation,
}

impl TeacherSpec {
    pub fn to_meta(&self) -> Vec<(String, String)> {
        vec![
            ("arch.input".into(), shape_string(&self.input)),
            ("arch.classes".into(), self.classes.to_string()),
            ("arch.width".into(), self.width.to_string()),
            ("arch.blocks".into(), self.blocks.to_string()),
            ("arch.kind".into(), self.kind.to_string()),
            ("arch.activation".into(), self.activation.to_string()),
        ]
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        Ok(Self {
            input: parse_shape(meta_get(meta, "arch.input")?)?,
            classes: meta_parse(meta, "arch.classes")?,
            width: meta_parse(meta, "arch.width")?,
            blocks: meta_parse(meta, "arch.blocks")?,
            kind: meta_get(meta, "arch.kind")?.parse()?,
            activation: meta_get(meta, "arch.activation")?.parse()?,
        })
    }
}

#[derive(Clone, Debug)]
enum Block {
    Dense {
        fc1: Linear,
        fc2: Linear,
    },
    Conv {
        conv1: Conv,
        gn1: GroupNorm,
        conv2: Conv,
        gn2: GroupNorm,
    },
}

/// Discrete residual network: stem, `y + f(y)` blocks, pooled linear head.
#[derive(Clone, Debug)]
pub struct TeacherNet {
    spec: TeacherSpec,
    params: Params,
    input_norm: InputNorm,
    stem: Stem,
    blocks: Vec<Block>,
    head: Head,
}

impl TeacherNet {
    /// Builds the network with weights zeroed; initialize or load a
    /// checkpoint to fill them.
    pub fn build(spec: TeacherSpec) -> Result<Self> {
        if spec.classes < 2 || spec.width == 0 || spec.input.contains(&0) {
            return Err(Error::Config(format!("invalid teacher spec {spec:?}")));
        }
        let mut params = Params::new();
        let input_norm = InputNorm::new(&mut params, spec.input[0]);
        let stem = Stem::new(&mut params, spec.kind, spec.input, spec.width, 1);
        let w = spec.width;
        let blocks = (0..spec.blocks)
            .map(|i| {
                let name = format!("blocks.{i}");
                match spec.kind {
                    ArchKind::Dense => Block::Dense {
                        fc1: Linear::new(&mut params, &format!("{name}.fc1"), w, w),
                        fc2: Linear::new(&mut params, &format!("{name}.fc2"), w, w),
                    },
                    ArchKind::Conv => Block::Conv {
                        conv1: Conv::new(&mut params, &format!("{name}.conv1"), w, w, 3, 1),
                        gn1: GroupNorm::new(&mut params, &format!("{name}.norm1"), w),
                        conv2: Conv::new(&mut params, &format!("{name}.conv2"), w, w, 3, 1),
                        gn2: GroupNorm::new(&mut params, &format!("{name}.norm2"), w),
                    },
                }
            })
            .collect();
        let head = Head::new(&mut params, w, spec.classes);
        Ok(Self {
            spec,
            params,
            input_norm,
            stem,
            blocks,
            head,
        })
    }

    /// Builds, He-initializes and installs input normalization statistics.
    /// Residual branches start at zero so a deep stack begins as the
    /// identity and trains stably at high learning rates.
    pub fn new(spec: TeacherSpec, stats: &NormStats, rng: &mut Rng) -> Result<Self> {
        let mut net = Self::build(spec)?;
        init_he(&mut net.params, rng);
        net.zero_residual_branches();
        net.input_norm.set_stats(&mut net.params, stats);
        Ok(net)
    }

    pub fn spec(&self) -> &TeacherSpec {
        &self.spec
    }

    /// Zeroes the last layer of every residual branch so each block is the
    /// identity map.
    pub fn zero_residual_branches(&mut self) {
        for b in &self.blocks {
            // for conv blocks the branch ends in a norm; zeroing its affine
            // part zeroes the branch whatever the conv computes
            let idx = match b {
                Block::Dense { fc2, .. } => [fc2.weight_index(), fc2.bias_index()],
                Block::Conv { gn2, .. } => [gn2.scale_index(), gn2.shift_index()],
            };
            for i in idx {
                self.params.value_mut(i).data_mut().fill(0.0);
            }
        }
    }

    fn block_forward(&self, tape: &mut Tape, p: &[Var], b: &Block, y: Var) -> Result<Var> {
        let act = self.spec.activation;
        let r = match b {
            Block::Dense { fc1, fc2 } => {
                let h = fc1.forward(tape, p, y)?;
                let h = act.apply(tape, h)?;
                fc2.forward(tape, p, h)?
            }
            Block::Conv {
                conv1,
                gn1,
                conv2,
                gn2,
            } => {
                let h = conv1.forward(tape, p, y)?;
                let h = gn1.forward(tape, p, h)?;
                let h = act.apply(tape, h)?;
                let h = conv2.forward(tape, p, h)?;
                gn2.forward(tape, p, h)?
            }
        };
        tape.add(y, r)
    }
}

impl Classifier for TeacherNet {
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
        let mut y = self.stem.forward(tape, p, x, self.spec.activation)?;
        for b in &self.blocks {
            y = self.block_forward(tape, p, b, y)?;
        }
        let logits = self.head.forward(tape, p, y)?;
        Ok(Forward { logits, nfe: 0 })
    }
}
