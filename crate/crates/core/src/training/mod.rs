//! Optimisation stages and their losses.

mod config;
pub mod losses;
mod optim;
mod report;
mod stages;

pub use config::{load_config, QInputMode, Scheduler, StageOverrides, StageSettings, TrainConfig, TrainStage};
pub use optim::Adam;
pub use report::{epoch_mean, reports_to_csv, reports_to_jsonl, write_reports, LossReport};
pub use stages::{
    check_stage_order, pretrain_generator, pretrain_step, pseudo_label, stage1_step, stage2_step, stage3_step,
    stage3_trainable, train_stage1, train_stage2, train_stage3, BatchStep, EpochHook, RunOptions, StageOutcome,
};
