use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::rng::Rng;

/// What a parameter is for; decides its initialization and whether the
/// optimizer touches it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Role {
    Weight { fan_in: usize },
    Bias,
    NormScale,
    NormShift,
    /// Fixed tensor saved with the model (e.g. input normalization).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub role: Role,
}

impl Param {
    pub fn trainable(&self) -> bool {
        self.role != Role::Buffer
    }
}

/// Ordered, named parameter collection of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    entries: Vec<Param>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], role: Role) -> usize {
        let value = match role {
            Role::NormScale => Tensor::ones(shape),
            _ => Tensor::zeros(shape),
        };
        self.entries.push(Param {
            name: name.into(),
            value,
            role,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.entries[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.entries.iter().find(|p| p.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.entries.iter().map(|p| p.value.clone()).collect()
    }

    /// Replaces every value; shapes must match.
    pub fn set_values(&mut self, values: Vec<Tensor>) {
        assert_eq!(values.len(), self.entries.len());
        for (p, v) in self.entries.iter_mut().zip(values) {
            assert_eq!(p.value.shape(), v.shape(), "shape of {}", p.name);
            p.value = v;
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.value.numel())
            .sum()
    }

    /// Records every parameter on `tape`. Trainable parameters become
    /// differentiable leaves when `trainable` is set, constants otherwise.
    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|p| {
                if trainable && p.trainable() {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }
}

/// He initialization: weights ~ N(0, sqrt(2 / fan_in)), biases and norm
/// shifts zero, norm scales one. Buffers are left alone.
pub fn init_he(params: &mut Params, rng: &mut Rng) {
    for p in params.entries.iter_mut() {
        match p.role {
            Role::Weight { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                for v in p.value.data_mut() {
                    *v = normal.sample(rng);
                }
            }
            Role::Bias | Role::NormShift => p.value.data_mut().fill(0.0),
            Role::NormScale => p.value.data_mut().fill(1.0),
            Role::Buffer => {}
        }
    }
}
