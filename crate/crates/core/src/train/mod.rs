//! AdamW training with warmup-cosine schedule, evaluation and checkpoints.

pub mod adamw;
pub mod checkpoint;
pub mod config;
pub mod run;

pub use adamw::{clip_grad_norm, AdamW, AdamWParams};
pub use config::TrainConfig;
pub use run::{
    config_hash, eval_batches, loss_and_grads, mean_loss, run_id, train_run, train_step, EvalPoint, RunData,
    RunOptions, RunOutput, RunRecord, RunStatus, RUN_SCHEMA_VERSION,
};
