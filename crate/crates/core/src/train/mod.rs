//! Contrastive training: loss, schedule, AdamW, synthetic data,
//! checkpoints and locked-text tuning.

mod checkpoint;
mod config;
mod data;
mod loss;
mod optim;
mod run;
mod step;

pub use checkpoint::{
    checkpoint_container, checkpoint_from_container, load_checkpoint, ltt_init, save_checkpoint, Checkpoint,
    FORMAT_VERSION,
};
pub use config::{sha256_hex, ArchRef, DataConfig, EvalConfig, LttConfig, ScheduleKind, TrainConfig};
pub use data::{Attributes, Batch, Sample, Split, SynthTask, MAX_VALUES, PAD};
pub use loss::{clip_loss, clip_loss_value, initial_logit_scale, l2_normalize, max_logit_scale};
pub use optim::{adamw_step, decays, lr_at_step, AdamW, OptimizerState};
pub use run::{initial_state, run_training, task_for, RunOutcome, CHECKPOINT_FILE, METRICS_FILE, METRICS_HEADER};
pub use step::{train_step, ClipModel, Forward, StepStats, TrainState, LOGIT_SCALE};
