//! Optimization loop: Adam with warmup, batched episodes, checkpoints.

mod checkpoint;
mod config;
mod optim;
mod train;

pub use checkpoint::{inspect, Checkpoint, CheckpointSummary, MAGIC, VERSION};
pub use config::{DataConfig, DataKind, DataSplits, Objective, Precision, TrainConfig};
pub use optim::{clip_global_norm, lr_schedule, Adam, AdamConfig};
pub use train::{thread_pool, RunOutputs, StepRecord, Trainer, METRICS_HEADER};
