//! Training and evaluation on small synthetic tasks.

pub mod char_lm;
pub mod error;
pub mod groups;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod schedule;
pub mod state_tracking;
pub mod theorem;
pub mod trainer;

pub use char_lm::{synthetic_corpus, train_char_lm, ByteVocab, CharLmConfig, CharLmRun};
pub use error::{Result, TrainError};
pub use groups::{gen_sk_sequences, sk_group_table, GroupSample, GroupTable};
pub use metrics::{write_metrics_csv, MetricRow};
pub use model::{ModelKind, ModelSpec, SequenceModel};
pub use optim::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use schedule::lr_schedule;
pub use state_tracking::{
    evaluate_length_generalization, train_state_tracking, LengthAccuracy, StateTrackingConfig, TrainRun,
};
pub use theorem::{reduction_deviation, theorem_reduction_check};
pub use trainer::{train_loop, OptimConfig};
