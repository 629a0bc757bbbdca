//! Alternating training: background sets with optional generated positives,
//! encoder (A) and denoiser (B) updates, and the stage scheduler.

mod augment;
mod background;
mod encoder;
mod schedule;
mod steps;

pub use augment::{hand_augment, AugmentKind};
pub use background::{
    sample_background, sample_minibatch, BackgroundBatch, Generator, Minibatch, Provenance,
};
pub use encoder::{Encoder, EncoderConfig};
pub use schedule::{
    history_csv, run_schedule, timing_csv, DiffusionConfig, EpochRecord, Stage, StageKind,
    StagePlan, TrainConfig, TrainMode, Trainer, TrainerConfig, HISTORY_FILE, MODEL_FILE,
    TIMING_FILE,
};
pub use steps::{
    a_step, b_step, contrastive_gradient, diffusion_gradient, diffusion_step, LossKind,
};
