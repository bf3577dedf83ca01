use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::params::{Params, Role};
use crate::autodiff::{default_groups, Tape, Var};
use crate::data::NormStats;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            _ => Err(Error::Config(format!("unknown activation {s:?}"))),
        }
    }
}

/// Fully connected layers on flattened inputs, or 3x3 convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Dense,
    Conv,
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchKind::Dense => "dense",
            ArchKind::Conv => "conv",
        })
    }
}

impl FromStr for ArchKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(ArchKind::Dense),
            "conv" => Ok(ArchKind::Conv),
            _ => Err(Error::Config(format!("unknown architecture kind {s:?}"))),
        }
    }
}

/// `x W + b` with `W: (in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    pub fn new(params: &mut Params, name: &str, inp: usize, out: usize) -> Self {
        Self {
            w: params.push(format!("{name}.weight"), &[inp, out], Role::Weight { fan_in: inp }),
            b: params.push(format!("{name}.bias"), &[out], Role::Bias),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w])?;
        tape.add_bias(y, p[self.b])
    }

    pub fn weight_index(&self) -> usize {
        self.w
    }

    pub fn bias_index(&self) -> usize {
        self.b
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new(
        params: &mut Params,
        name: &str,
        inp: usize,
        out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        Self {
            w: params.push(
                format!("{name}.weight"),
                &[out, inp, k, k],
                Role::Weight { fan_in: inp * k * k },
            ),
            b: params.push(format!("{name}.bias"), &[out], Role::Bias),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p[self.w], self.stride, self.pad)?;
        tape.add_bias(y, p[self.b])
    }

    pub fn weight_index(&self) -> usize {
        self.w
    }

    pub fn bias_index(&self) -> usize {
        self.b
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

impl GroupNorm {
    pub fn new(params: &mut Params, name: &str, channels: usize) -> Self {
        Self {
            gamma: params.push(format!("{name}.scale"), &[channels], Role::NormScale),
            beta: params.push(format!("{name}.shift"), &[channels], Role::NormShift),
            groups: default_groups(channels),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        tape.group_norm(x, p[self.gamma], p[self.beta], self.groups)
    }

    pub fn scale_index(&self) -> usize {
        self.gamma
    }

    pub fn shift_index(&self) -> usize {
        self.beta
    }
}

/// Fixed per-channel `(x - mean) / std`, stored as buffers so attacks can
/// work directly in pixel space.
#[derive(Clone, Debug)]
pub struct InputNorm {
    scale: usize,
    shift: usize,
}

impl InputNorm {
    pub fn new(params: &mut Params, channels: usize) -> Self {
        Self {
            scale: params.push("input.scale", &[channels], Role::Buffer),
            shift: params.push("input.shift", &[channels], Role::Buffer),
        }
    }

    pub fn set_stats(&self, params: &mut Params, stats: &NormStats) {
        let scale = params.value_mut(self.scale);
        for (s, sd) in scale.data_mut().iter_mut().zip(&stats.std) {
            *s = 1.0 / sd;
        }
        let shift = params.value_mut(self.shift);
        for ((t, m), sd) in shift.data_mut().iter_mut().zip(&stats.mean).zip(&stats.std) {
            *t = -m / sd;
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        tape.channel_affine(x, p[self.scale], p[self.shift])
    }
}

/// First layer: a dense projection of the flattened input, or a 3x3
/// convolution followed by group norm.
#[derive(Clone, Debug)]
pub enum Stem {
    Dense(Linear),
    Conv(Conv, GroupNorm),
}

impl Stem {
    pub fn new(
        params: &mut Params,
        kind: ArchKind,
        input: [usize; 3],
        width: usize,
        stride: usize,
    ) -> Self {
        let [c, h, w] = input;
        match kind {
            ArchKind::Dense => Stem::Dense(Linear::new(params, "stem", c * h * w, width)),
            ArchKind::Conv => Stem::Conv(
                Conv::new(params, "stem", c, width, 3, stride),
                GroupNorm::new(params, "stem.norm", width),
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var, act: Activation) -> Result<Var> {
        let h = match self {
            Stem::Dense(fc) => {
                let s = tape.shape(x).to_vec();
                let flat = tape.reshape(x, &[s[0], s[1..].iter().product()])?;
                fc.forward(tape, p, flat)?
            }
            Stem::Conv(conv, gn) => {
                let h = conv.forward(tape, p, x)?;
                gn.forward(tape, p, h)?
            }
        };
        act.apply(tape, h)
    }
}

/// Global average pool (for feature maps) followed by a linear layer.
#[derive(Clone, Debug)]
pub struct Head {
    fc: Linear,
}

impl Head {
    pub fn new(params: &mut Params, width: usize, classes: usize) -> Self {
        Self {
            fc: Linear::new(params, "head", width, classes),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], y: Var) -> Result<Var> {
        let y = if tape.shape(y).len() > 2 {
            tape.mean_spatial(y)?
        } else {
            y
        };
        self.fc.forward(tape, p, y)
    }
}
