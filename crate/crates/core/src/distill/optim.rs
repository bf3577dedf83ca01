use std::fmt;
use std::str::FromStr;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::Params;

pub const SGD_MOMENTUM: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Step schedule: `lr` for the first half of training, `lr / 10` until
/// three quarters, `lr / 100` afterwards.
pub fn lr_schedule(initial_lr: f64, epoch: usize, total_epochs: usize) -> f64 {
    if epoch < total_epochs / 2 {
        initial_lr
    } else if epoch < 3 * total_epochs / 4 {
        initial_lr / 10.0
    } else {
        initial_lr / 100.0
    }
}

/// `v <- mu v + g; p <- p - lr v`.
pub fn sgd_momentum_step(params: &mut [Tensor], grads: &[Tensor], velocity: &mut [Tensor], lr: f64, mu: f64) {
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = mu * *vi + gi;
            *pi -= lr * *vi;
        }
    }
}

pub struct AdamState<'a> {
    pub m: &'a mut [Tensor],
    pub v: &'a mut [Tensor],
    /// 1-based step counter.
    pub t: u64,
}

/// Bias-corrected Adam update.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: AdamState<'_>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    assert!(state.t >= 1, "adam step counter starts at 1");
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut());
        for (((pi, gi), mi), vi) in it {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *pi -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!("unknown optimizer {s:?} (sgd|adam)"))),
        }
    }
}

/// Optimizer state over the trainable parameters of one model.
pub struct Optimizer {
    kind: OptimizerKind,
    slot1: Vec<Tensor>,
    slot2: Vec<Tensor>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &Params) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .filter(|p| p.trainable())
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            kind,
            slot2: if kind == OptimizerKind::Adam {
                zeros.clone()
            } else {
                Vec::new()
            },
            slot1: zeros,
            t: 0,
        }
    }

    /// Applies one update; `grads` holds one tensor per trainable parameter,
    /// in order.
    pub fn step(&mut self, params: &mut Params, grads: &[Tensor], lr: f64) {
        let idx: Vec<usize> = (0..params.len()).filter(|&i| params.get(i).trainable()).collect();
        let mut values: Vec<Tensor> = idx.iter().map(|&i| params.get(i).value.clone()).collect();
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => sgd_momentum_step(&mut values, grads, &mut self.slot1, lr, SGD_MOMENTUM),
            OptimizerKind::Adam => adam_step(
                &mut values,
                grads,
                AdamState {
                    m: &mut self.slot1,
                    v: &mut self.slot2,
                    t: self.t,
                },
                lr,
                ADAM_BETA1,
                ADAM_BETA2,
                ADAM_EPS,
            ),
        }
        for (i, v) in idx.into_iter().zip(values) {
            *params.value_mut(i) = v;
        }
    }
}
