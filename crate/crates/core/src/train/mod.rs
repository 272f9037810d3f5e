//! Optimization, training loops, metrics and checkpoints.

mod audit;
mod checkpoint;
mod finetune;
mod metrics;
mod optim;
mod pretrain;
mod shift;

pub use audit::{audit_gating, SiteAudit};
pub use checkpoint::{Checkpoint, TrainState, MAGIC, SCHEMA_VERSION};
pub use finetune::{evaluate, evaluate_parallel, finetune, predict, EpochLog, FinetuneConfig, FinetuneOutcome};
pub use metrics::Metrics;
pub use optim::{cosine_warmup_lr, AdamW, Moments, OptimConfig};
pub use pretrain::{pretrain, write_trace_csv, PretrainConfig, Pretrainer, StepLog};
pub use shift::{ShiftProtocol, ShiftRun};
