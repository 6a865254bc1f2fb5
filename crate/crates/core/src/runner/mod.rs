//! Run configuration, checkpoints, the training loop and the CLI commands.

mod checkpoint;
mod commands;
mod config;
mod trainer;

pub use checkpoint::{Checkpoint, Record, RecordData, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use commands::{cmd_eval, cmd_heatmap, cmd_synth, cmd_train, evaluate, load_model, EvalOutcome};
pub use config::{load_config, parse_config, RunConfig, PROFILES};
pub use trainer::{
    run_training, training_split, RunPaths, StepLog, TrainData, TrainState, Trainer, FINAL_NAME, LATEST_NAME,
    LOG_HEADER, LOG_NAME,
};
