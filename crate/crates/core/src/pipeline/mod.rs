//! Run orchestration: configuration, the two training stages, adapter
//! merging and evaluation reports.

mod config;
mod eval;
mod model;
mod train;

pub use config::{
    Config, EvalConfig, FlowConfig, LoraConfig, LrSchedule, Paths, RecraftConfig, Routing,
    TrainConfig,
};
pub use eval::{
    evaluate, held_out_loss, permutation_test, random_nonidentity_perm, recraft_consistency,
    sample_sequences, EvalReport, PermutationScore, RecraftScore, Source, TaskScore,
};
pub use model::{CheckpointMeta, LoraMeta, Model, Stage};
pub use train::{
    build_loss, merge_checkpoint, recraft_init, recraft_run, stage1_init, stage1_run, train_step,
    Objective, TrainState,
};
