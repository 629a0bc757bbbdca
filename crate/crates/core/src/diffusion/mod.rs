//! Conditional denoising diffusion: noise schedule, forward corruption, step
//! encoding, the noise-prediction network and the reverse sampler.

mod denoiser;
mod sampler;
mod schedule;

pub use denoiser::{Denoiser, DenoiserConfig};
pub use sampler::{denoise_step, denoise_step_with_prediction, generate, generate_batch};
pub use schedule::{forward_noise, forward_noise_rows, make_schedule, time_encode, NoiseSchedule};
