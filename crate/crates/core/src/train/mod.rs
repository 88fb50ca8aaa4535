mod config;
mod engine;
mod metrics;
mod optim;
mod schedule;
#[cfg(test)]
mod tests;

pub use config::{ScheduleKind, TrainRunConfig};
pub use engine::{
    evaluate, evaluate_with_loss, holdout_split, loss_batches, train, EpochRecord, History,
    Trainer, EVAL_BATCH,
};
pub use metrics::{psnr, top1_error, BT601, PSNR_CAP_DB};
pub use optim::{Optimizer, OptimizerKind};
pub use schedule::{LrSchedule, Plateau};
