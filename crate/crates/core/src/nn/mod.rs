//! Layers, MLP container, SGD with momentum/weight decay, and learning-rate
//! schedules with warm-up.

mod layer;
mod mlp;
mod optim;
mod schedule;
mod step;

pub use layer::{batchnorm_forward, BatchNorm1d, Layer, Linear};
pub use mlp::{freeze_batchnorm, ForwardPass, Mlp};
pub use optim::{sgd_step, SgdConfig, SgdState};
pub use schedule::LrSchedule;
pub use step::{eval_losses, train_step_class, train_step_mse, StepAt};
