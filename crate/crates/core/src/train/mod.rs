//! Optimisation, site sampling and the training loops.

mod config;
mod finetune;
mod loss;
mod metrics;
mod optim;
mod pretrain;
mod sites;
mod state;

pub use config::{CurriculumConfig, OptimizerConfig, ScheduleConfig};
pub use finetune::{
    curriculum_finetune, evaluate_countdown, finetune_eval_loss, finetune_loss, finetune_step, generate_answer,
    train_epochs, AccuracyReport, CurriculumReport, FinetuneItem, StageSummary, MAX_ANSWER_TOKENS,
};
pub use loss::LossMask;
pub use metrics::{MetricsRow, MetricsWriter, METRICS_HEADER};
pub use optim::{adamw_step, clip_grad_norm, global_norm, OptimizerState, UpdateStats};
pub use pretrain::{evaluate_perplexity, lm_loss, lm_perplexity, lm_step, pretrain_loss, pretrain_step, sample_plan};
pub use sites::select_augmentation_sites;
pub use state::{BoundState, StepStats, TrainState, TrainableSet};
