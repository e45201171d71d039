//! Pixel-space diffusion: schedules, the forward process, the noise
//! predictor, guidance and reverse sampling.

pub mod denoiser;
pub mod sampler;
pub mod schedule;

pub use denoiser::{denoise, Context, DenoiserConfig, Timestep};
pub use sampler::{
    cfg_combine, ddpm_mean, ddpm_sigma, posterior_sigma, predict_x0, reverse_step_ddpm, reverse_step_literal, sample_loop, CfgMode,
    GuidanceConfig, Predictor, SamplerKind,
};
pub use schedule::{diffuse_step, diffuse_to, NoiseSchedule};

/// Standard linear schedule used for training.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> crate::Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_start, beta_end)
}
