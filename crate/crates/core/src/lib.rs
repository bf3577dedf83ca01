//! Continuous-depth classifiers trained by distillation from residual
//! teachers, plus the tooling to measure their adversarial robustness.

pub mod attacks;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod distill;
pub mod error;
pub mod experiments;
pub mod fsutil;
pub mod models;
pub mod odeint;
pub mod rng;

pub use error::{Error, Result};
