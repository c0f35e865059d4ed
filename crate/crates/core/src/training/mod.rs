//! Optimizer, learning-rate schedule, metrics, and the train / evaluate /
//! gradient-check loops.

mod config;
mod gradcheck;
mod metrics;
mod optim;
mod trainer;

pub use config::TrainConfig;
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport, GroupError};
pub use metrics::{miou, MetricState};
pub use optim::{poly_lr, sgd_step, OptimizerState};
pub use trainer::{
    batch_indices, check_dataset, collate, evaluate, history_csv, init_params, loss_and_grads, predict, train, upsample_bilinear,
    EvalReport, HistoryRow, TrainOptions, TrainOutcome, HISTORY_HEADER,
};
