//! Augmentation, training, checkpoints and experiment drivers.

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod experiments;
pub mod optim;
pub mod train;

pub use augment::{augment, AugmentConfig};
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::{CaseData, Dataset};
pub use experiments::{
    ablation_variants, fusion_variants, run_crossval, run_grid, run_holdout, run_variant, single_organ_variant,
    CrossvalResult, Protocol, Variant,
};
pub use optim::{clip_global_norm, Adam, AdamConfig};
pub use train::{case_inputs, evaluate_model, train, EpochRecord, TrainConfig, TrainOutcome};
