//! Denoising diffusion on low-dimensional Euclidean data.
//!
//! Steps are 1-based: `x_T` is pure noise and the chain ends at `x_0`.

mod data;
mod denoiser;
mod sampling;
mod schedule;
mod train;

pub use data::{Component, DataConfig, Dataset};
pub use denoiser::{Denoiser, DenoiserArch, EpsModel, Guided};
pub use sampling::{
    forward_noising, posterior_mean, reverse_step, reverse_step_batch, sample_batch,
    sample_terminals, sample_trajectory, RolloutNoise,
};
pub use schedule::{make_schedule, NoiseSchedule, ScheduleKind, VarianceChoice};
pub use train::{denoising_loss, kl_bound, pretrain, PretrainConfig};
