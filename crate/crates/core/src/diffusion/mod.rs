//! Discrete variance-preserving diffusion: schedules, denoising training and
//! (classifier-guided) reverse sampling.

pub mod sampler;
pub mod schedule;
pub mod train;

pub use sampler::{
    classifier_score, guided_sample, sample_unguided, GuidanceClassifier, GuidanceSpec,
    SampleBatch, SampleMeta, SamplerKind,
};
pub use schedule::{noise_with, NoiseSchedule, ScheduleKind};
pub use train::{
    denoising_loss, denoising_loss_with, train_score_net, DenoisingLoss, ScoreModel, TrainConfig,
};
