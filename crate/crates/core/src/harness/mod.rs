//! Corpus ingestion, optimisation, logging, checkpointing and the training loop.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod log;
pub mod optim;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{DataConfig, Decay, LrSchedule, OptimizerConfig, TrainConfig, TrainMode};
pub use data::{eval_batches, load_corpus, next_batch, Batch, Corpus};
pub use log::{LossLog, LossRecord};
pub use optim::{adamw_step, clip_grad_norm, lr_at, Moments};
pub use trainer::{evaluate, evaluate_batches, load_corpora, train, TrainObserver, Trainer};
