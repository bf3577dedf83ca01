//! Distillation objective, optimizers and the training loops.

mod loss;
mod optim;
mod record;
mod train;

pub use loss::{combined_loss, cross_entropy, kd_loss, loss_weights, soft_targets, soft_targets_var, LossParts};
pub use optim::{
    adam_step, lr_schedule, sgd_momentum_step, AdamState, Optimizer, OptimizerKind, ADAM_BETA1,
    ADAM_BETA2, ADAM_EPS, SGD_MOMENTUM,
};
pub use record::{EpochRecord, TrainRecord, TRAIN_CSV_COLUMNS, TRAIN_CSV_SCHEMA};
pub use train::{distill_student, train_plain, train_teacher, DistillConfig, TrainConfig, Trained};
