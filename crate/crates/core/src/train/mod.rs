//! Two-stage training: per-scale domain-adversarial MIL, then a shared
//! multi-scale head on frozen extractors, plus the patch-level baseline.

mod checkpoint;
mod config;
mod history;
mod optim;
mod patch;
mod prepare;
mod stage1;
mod stage2;

pub use checkpoint::{Checkpoint, Mode, MAGIC, VERSION};
pub use config::TrainConfig;
pub use history::{format_history, write_history, EpochRecord, HISTORY_HEADER};
pub use optim::{lambda_schedule, sgd_momentum_step, OptimizerState};
pub use patch::{patch_train, PatchClassifier, PatchOutcome, PATCH_STREAM};
pub use prepare::{
    epoch_order, permute_rows, probe_rng, shuffled_rows, stream_rng, training_bags, TrainingBag, STREAM_BAGS,
    STREAM_INIT, STREAM_ORDER,
};
pub use stage1::{
    stage1_gradients, stage1_init, stage1_step, stage1_train, Stage1Gradients, Stage1Model, Stage1Optimizer,
    Stage1Outcome, StepLosses,
};
pub use stage2::{
    batch_features, concat_rows, extractors_for_scales, stage2_step, stage2_train, MultiScaleModel, Stage2Outcome,
    SHARED_HEAD_STREAM,
};
